//! Monte-Carlo certification of equilibria: cost estimates on a frozen curve,
//! the spike-variation test of local optimality, and the reduction of the
//! Riccati family to the classical solve for time-consistent weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{EquilibriumResult, Problem};
use crate::error::{Error, Result};
use crate::hjb1d::XDomain;
use crate::measures::{uniform_grid, DistributionCurve};
use crate::model::LqModelSpec;
use crate::riccati::{extract_strategy_lq, solve_classical_riccati, solve_riccati_family_with, RiccatiOptions};
use crate::rng::derive_seed;
use crate::simulate::{simulate_frozen, CostModel, FrozenCurve, FrozenStart};
use crate::strategy::{AffineStrategy, Feedback, SpikeFeedback};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { n_paths: 20_000, seed: 0, workers: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn mean_stderr(samples: &[f64]) -> CostEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return CostEstimate { mean, stderr: 0.0 };
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    CostEstimate { mean, stderr: (var / n).sqrt() }
}

/// `J(tau; t, x; control)` on the frozen curve: sample mean and standard error
/// over `mc.n_paths` paths. Equal seeds give equal noise.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost_j<M: CostModel, S: Feedback + ?Sized>(
    model: &M,
    frozen: &FrozenCurve,
    control: &S,
    tau: f64,
    t: f64,
    x: &[f64],
    mc: &McOptions,
) -> Result<CostEstimate> {
    let costs = simulate_frozen(model, control, frozen, tau, t, &FrozenStart::Point(x.to_vec()), mc.n_paths, mc.seed, mc.workers)?;
    Ok(mean_stderr(&costs.totals()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
}

/// Constant probe controls used at each probe point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeControls {
    /// `u*(t, x) + delta e_r` for every listed `delta` and control coordinate `r`.
    pub offsets: Vec<f64>,
    /// Extra absolute controls.
    pub fixed: Vec<Vec<f64>>,
}

impl Default for ProbeControls {
    fn default() -> Self {
        Self { offsets: vec![-1.0, -0.5, 0.5, 1.0], fixed: Vec::new() }
    }
}

/// Fractions of the horizon used when no ladder is given.
pub const DEFAULT_LADDER: [f64; 4] = [0.08, 0.04, 0.02, 0.01];

pub fn default_ladder(horizon: f64) -> Vec<f64> {
    DEFAULT_LADDER.iter().map(|f| f * horizon).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub t: f64,
    pub x: Vec<f64>,
    pub control: Vec<f64>,
    pub eps: Vec<f64>,
    /// `(J(u*) - J(spike)) / eps`
    pub quotients: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Intercept of the least-squares line through `(eps, D(eps))`.
    pub limit: f64,
    /// Three standard errors at the finest rung.
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub probes: Vec<ProbeResult>,
    pub overall_pass: bool,
    pub mc: McOptions,
    pub eps_ladder: Vec<f64>,
}

impl SpikeReport {
    /// One row per probe and rung: `probe, t, x_1.., v_1.., eps, d, stderr`.
    pub fn write_probe_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let Some(first) = self.probes.first() else {
            writeln!(out, "probe,t,eps,d,stderr")?;
            return Ok(());
        };
        let mut header = vec!["probe".to_string(), "t".to_string()];
        header.extend((1..=first.x.len()).map(|i| format!("x_{i}")));
        header.extend((1..=first.control.len()).map(|i| format!("v_{i}")));
        header.extend(["eps", "d", "stderr"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for (p, probe) in self.probes.iter().enumerate() {
            for ((e, d), s) in probe.eps.iter().zip(&probe.quotients).zip(&probe.stderr) {
                let mut row = vec![p.to_string(), probe.t.to_string()];
                row.extend(probe.x.iter().map(|v| v.to_string()));
                row.extend(probe.control.iter().map(|v| v.to_string()));
                row.extend([e, d, s].map(|v| v.to_string()));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

fn extrapolate(eps: &[f64], d: &[f64]) -> f64 {
    if eps.len() == 1 {
        return d[0];
    }
    let n = eps.len() as f64;
    let me = eps.iter().sum::<f64>() / n;
    let md = d.iter().sum::<f64>() / n;
    let sed: f64 = eps.iter().zip(d).map(|(e, v)| (e - me) * (v - md)).sum();
    let see: f64 = eps.iter().map(|e| (e - me).powi(2)).sum();
    md - sed / see * me
}

fn ladder_steps(frozen: &FrozenCurve, ladder: &[f64]) -> Result<Vec<usize>> {
    if ladder.is_empty() {
        return Err(Error::InvalidParameter("empty epsilon ladder".into()));
    }
    if ladder.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter("epsilon ladder must be strictly decreasing".into()));
    }
    ladder
        .iter()
        .map(|&e| {
            let s = e / frozen.step();
            let r = s.round();
            if r < 1.0 || (s - r).abs() > 1e-6 {
                Err(Error::InvalidParameter(format!("epsilon {e} is not a positive multiple of the step {}", frozen.step())))
            } else {
                Ok(r as usize)
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn spike_generic<M: CostModel, S: Feedback + ?Sized>(
    model: &M,
    frozen: &FrozenCurve,
    strategy: &S,
    probes: &[ProbePoint],
    controls: &ProbeControls,
    ladder: &[f64],
    mc: &McOptions,
) -> Result<SpikeReport> {
    let rungs = ladder_steps(frozen, ladder)?;
    let grid = frozen.grid();
    let h = frozen.step();
    let l = strategy.control_dim();
    let mut results = Vec::new();
    for (p, probe) in probes.iter().enumerate() {
        let k0 = frozen.node_of(probe.t).ok_or(Error::OffGrid(probe.t))?;
        let t = grid[k0];
        if k0 + rungs[0] > frozen.steps() {
            return Err(Error::Probe(format!("t = {t} leaves no room for epsilon = {}", ladder[0])));
        }
        let seed = derive_seed(mc.seed, p as u64);
        let start = FrozenStart::Point(probe.x.clone());
        let base = simulate_frozen(model, strategy, frozen, t, t, &start, mc.n_paths, seed, mc.workers)?.totals();
        let mut u_star = vec![0.0; l];
        strategy.control(t, &probe.x, &mut u_star);
        let mut values: Vec<Vec<f64>> = Vec::new();
        for r in 0..l {
            for delta in &controls.offsets {
                let mut v = u_star.clone();
                v[r] += delta;
                values.push(v);
            }
        }
        for v in &controls.fixed {
            if v.len() != l {
                return Err(Error::DimensionMismatch { expected: l, found: v.len() });
            }
            values.push(v.clone());
        }
        for v in values {
            let mut quotients = Vec::with_capacity(ladder.len());
            let mut stderr = Vec::with_capacity(ladder.len());
            for (&eps, &m) in ladder.iter().zip(&rungs) {
                // switch back halfway between nodes so rounding never moves the boundary
                let spike = SpikeFeedback { base: strategy, value: v.clone(), start: t - 0.5 * h, until: grid[k0 + m] - 0.5 * h };
                let composite = simulate_frozen(model, &spike, frozen, t, t, &start, mc.n_paths, seed, mc.workers)?.totals();
                let diffs: Vec<f64> = base.iter().zip(&composite).map(|(a, b)| (a - b) / eps).collect();
                let est = mean_stderr(&diffs);
                quotients.push(est.mean);
                stderr.push(est.stderr);
            }
            let limit = extrapolate(ladder, &quotients);
            let threshold = 3.0 * stderr[stderr.len() - 1];
            results.push(ProbeResult {
                t,
                x: probe.x.clone(),
                control: v,
                eps: ladder.to_vec(),
                quotients,
                stderr,
                limit,
                threshold,
                pass: limit <= threshold,
            });
        }
    }
    let overall_pass = results.iter().all(|r| r.pass);
    Ok(SpikeReport { probes: results, overall_pass, mc: *mc, eps_ladder: ladder.to_vec() })
}

/// Spike test of `strategy` against the frozen curve `mu`: for each probe point
/// and probe control `v`, `D(eps) = (J(u) - J(v on [t, t + eps), u after)) / eps`
/// with shared noise, extrapolated linearly to `eps = 0`. A probe passes when
/// the limit is at most three standard errors of the finest rung.
///
/// Probe points must be grid nodes inside the spatial domain (HJB backend) or
/// within the range of the cloud at that node.
#[allow(clippy::too_many_arguments)]
pub fn spike_test_strategy<S: Feedback + ?Sized>(
    problem: &Problem,
    mu: &DistributionCurve,
    strategy: &S,
    domain: Option<XDomain>,
    probes: &[ProbePoint],
    controls: &ProbeControls,
    ladder: &[f64],
    mc: &McOptions,
) -> Result<SpikeReport> {
    for probe in probes {
        if probe.x.len() != problem.dim() {
            return Err(Error::DimensionMismatch { expected: problem.dim(), found: probe.x.len() });
        }
        let inside = match domain {
            Some(d) => d.lo <= probe.x[0] && probe.x[0] <= d.hi,
            None => {
                let k = mu.node_of(probe.t).ok_or(Error::OffGrid(probe.t))?;
                let cloud = mu.measure(k);
                (0..cloud.dim()).all(|c| {
                    let axis = cloud.sorted_axis(c);
                    axis[0] <= probe.x[c] && probe.x[c] <= axis[axis.len() - 1]
                })
            }
        };
        if !inside {
            return Err(Error::Probe(format!("x = {:?} at t = {} is outside the simulated state range", probe.x, probe.t)));
        }
    }
    let frozen = problem.frozen(mu)?;
    match problem {
        Problem::Lq(m) => spike_generic(m, &frozen, strategy, probes, controls, ladder, mc),
        Problem::General(m) => spike_generic(m, &frozen, strategy, probes, controls, ladder, mc),
    }
}

/// [`spike_test_strategy`] for an equilibrium result.
pub fn spike_test(
    problem: &Problem,
    eq: &EquilibriumResult,
    probes: &[ProbePoint],
    controls: &ProbeControls,
    ladder: &[f64],
    mc: &McOptions,
) -> Result<SpikeReport> {
    spike_test_strategy(problem, &eq.mu_star, &eq.strategy_star, eq.x_domain, probes, controls, ladder, mc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionReport {
    pub gain_gap: f64,
    pub offset_gap: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn check_tau_independent(lq: &LqModelSpec, frozen: &FrozenCurve) -> Result<()> {
    let grid = frozen.grid();
    let steps = grid.len() - 1;
    let stride = (steps / 50).max(1);
    let horizon = lq.horizon;
    let mat_close = |a: nalgebra::DMatrix<f64>, b: nalgebra::DMatrix<f64>| a.iter().zip(b.iter()).all(|(x, y)| close(*x, *y));
    let end = &frozen.moments()[steps];
    for k in (0..=steps).step_by(stride) {
        let t = grid[k];
        let m = &frozen.moments()[k];
        if !mat_close((lq.terminal_weight)(t), (lq.terminal_weight)(horizon)) || !close((lq.terminal_offset)(t, end), (lq.terminal_offset)(horizon, end)) {
            return Err(Error::TauDependent(format!("terminal cost changes with tau at {t}")));
        }
        for j in (0..=k).step_by(stride) {
            let tau = grid[j];
            if !mat_close((lq.state_weight)(tau, t), (lq.state_weight)(t, t))
                || !mat_close((lq.control_weight)(tau, t), (lq.control_weight)(t, t))
                || !close((lq.running_offset)(tau, t, m), (lq.running_offset)(t, t, m))
            {
                return Err(Error::TauDependent(format!("running cost changes with tau at (tau, t) = ({tau}, {t})")));
            }
        }
    }
    Ok(())
}

/// Sup-norm gaps between the Riccati-family feedback and the classical optimal
/// feedback, both computed on the frozen curve `mu`.
pub fn time_consistent_reduction_check(lq: &LqModelSpec, mu: &DistributionCurve) -> Result<ReductionReport> {
    let frozen = FrozenCurve::new(lq, mu)?;
    check_tau_independent(lq, &frozen)?;
    let fam = solve_riccati_family_with(lq, &frozen, RiccatiOptions::default())?;
    let equilibrium = extract_strategy_lq(&fam, lq)?;
    let classical = solve_classical_riccati(lq, &frozen, 4)?.strategy(lq)?;
    Ok(gaps(&equilibrium, &classical))
}

fn gaps(a: &AffineStrategy, b: &AffineStrategy) -> ReductionReport {
    let mut report = ReductionReport { gain_gap: 0.0, offset_gap: 0.0 };
    for k in 0..a.grid().len() {
        report.gain_gap = report.gain_gap.max((a.gain(k) - b.gain(k)).amax());
        report.offset_gap = report.offset_gap.max((a.offset(k) - b.offset(k)).amax());
    }
    report
}

/// Constant curve at a given cloud on the uniform grid, for standalone checks.
pub fn constant_curve(horizon: f64, steps: usize, cloud: &crate::measures::EmpiricalMeasure) -> Result<DistributionCurve> {
    DistributionCurve::constant(uniform_grid(horizon, steps), cloud)
}
