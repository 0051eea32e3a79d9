//! Fixed-point iteration `mu -> T1(T2(mu))` with common random numbers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb1d::{extract_strategy_grid, solve_hjb_family_with, HjbOptions, XDomain};
use crate::measures::{curve_distance_m, uniform_grid, DistributionCurve, EmpiricalMeasure, MomentVector};
use crate::model::{LqModelSpec, ModelSpec, Psi};
use crate::riccati::{extract_strategy_lq, solve_riccati_family_with, RiccatiOptions};
use crate::simulate::{simulate_t1_from, FrozenCurve, InitialLaw, ParticlePaths, SimOptions};
use crate::strategy::FeedbackStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Riccati,
    Hjb1d,
}

#[derive(Debug, Clone)]
pub enum Problem {
    Lq(LqModelSpec),
    General(ModelSpec),
}

impl Problem {
    pub fn name(&self) -> &str {
        match self {
            Problem::Lq(m) => &m.name,
            Problem::General(m) => &m.name,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Problem::Lq(m) => m.horizon,
            Problem::General(m) => m.horizon,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Lq(m) => m.dim,
            Problem::General(_) => 1,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Problem::Lq(m) => m.control_dim,
            Problem::General(m) => m.control_dim,
        }
    }

    pub fn natural_backend(&self) -> Backend {
        match self {
            Problem::Lq(_) => Backend::Riccati,
            Problem::General(_) => Backend::Hjb1d,
        }
    }

    /// The law map under `strategy` from a given initial cloud.
    pub fn simulate(
        &self,
        strategy: &FeedbackStrategy,
        cloud: &EmpiricalMeasure,
        opts: &SimOptions,
    ) -> Result<(DistributionCurve, ParticlePaths)> {
        match self {
            Problem::Lq(m) => simulate_t1_from(m, strategy, cloud, opts),
            Problem::General(m) => simulate_t1_from(m, strategy, cloud, opts),
        }
    }

    pub fn frozen(&self, mu: &DistributionCurve) -> Result<FrozenCurve> {
        match self {
            Problem::Lq(m) => FrozenCurve::new(m, mu),
            Problem::General(m) => FrozenCurve::new(m, mu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumOptions {
    pub backend: Option<Backend>,
    pub n_particles: usize,
    pub steps: usize,
    pub seed: u64,
    /// Stop when successive curves are within `tol_fp * sup_t E|X(t)|^2`.
    pub tol_fp: f64,
    pub max_iter: usize,
    /// Offset damping factor in `(0, 1]` for the Riccati backend; 1 disables it.
    pub damping: f64,
    pub riccati: RiccatiOptions,
    pub hjb: HjbOptions,
    /// Spatial grid of the HJB backend; derived from the initial law if absent.
    pub x_domain: Option<XDomain>,
    pub x_intervals: usize,
    /// Start from this curve instead of the constant curve at the initial cloud.
    #[serde(skip)]
    pub warm_start: Option<DistributionCurve>,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            backend: None,
            n_particles: 10_000,
            steps: 200,
            seed: 0,
            tol_fp: 1e-3,
            max_iter: 50,
            damping: 1.0,
            riccati: RiccatiOptions::default(),
            hjb: HjbOptions::default(),
            x_domain: None,
            x_intervals: 400,
            warm_start: None,
            workers: None,
        }
    }
}

impl EquilibriumOptions {
    pub fn sim(&self) -> SimOptions {
        SimOptions::new(self.n_particles, self.steps, self.seed).with_workers(self.workers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub m_distance: f64,
    /// `m_distance[k] / m_distance[k-1]`; absent for the first iteration.
    pub contraction_ratio: Option<f64>,
    /// Sup-norm change of the strategy tables; absent for the first iteration.
    pub strategy_delta: Option<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    /// The distance grew in three consecutive iterations.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub mu_star: DistributionCurve,
    pub strategy_star: FeedbackStrategy,
    /// Particle paths behind `mu_star`.
    pub paths: ParticlePaths,
    pub history: Vec<IterationRecord>,
    pub status: Status,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    pub n_particles: usize,
    pub x_domain: Option<XDomain>,
}

impl EquilibriumResult {
    pub fn distances(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.m_distance).collect()
    }

    pub fn initial_cloud(&self) -> &EmpiricalMeasure {
        self.mu_star.measure(0)
    }
}

/// `mean -+ 8 sqrt(var0 + b0^2 T)` with `b0` the diffusion at the initial mean.
pub fn default_domain(model: &ModelSpec, initial: &InitialLaw, intervals: usize) -> Result<XDomain> {
    let (mean, sd) = initial.mean_sd();
    let m0 = MomentVector {
        generalized: model.functionals.iter().map(|f| f(&mean)).collect(),
        second_moment: mean[0] * mean[0] + sd[0] * sd[0],
        mean: mean.clone(),
    };
    let b0 = (model.diffusion)(0.0, mean[0], &m0);
    XDomain::around(mean[0], (sd[0] * sd[0] + b0 * b0 * model.horizon).sqrt(), intervals)
}

/// The backward map: equilibrium strategy of the problem frozen at `mu`.
pub fn solve_t2(
    problem: &Problem,
    frozen: &FrozenCurve,
    options: &EquilibriumOptions,
    domain: Option<XDomain>,
) -> Result<FeedbackStrategy> {
    match (problem, options.backend.unwrap_or(problem.natural_backend())) {
        (Problem::Lq(lq), Backend::Riccati) => {
            let fam = solve_riccati_family_with(lq, frozen, options.riccati)?;
            Ok(FeedbackStrategy::Affine(extract_strategy_lq(&fam, lq)?))
        }
        (Problem::General(model), Backend::Hjb1d) => {
            let domain = domain.ok_or_else(|| Error::InvalidParameter("the HJB backend needs a spatial domain".into()))?;
            let surface = solve_hjb_family_with(model, frozen, domain, options.hjb)?;
            Ok(FeedbackStrategy::Grid(extract_strategy_grid(&surface, model)?))
        }
        (p, b) => Err(Error::BackendMismatch(format!("{b:?} backend cannot solve model '{}'", p.name()))),
    }
}

/// Iterates `mu_{k+1} = T1(T2(mu_k))` from the constant curve at the initial
/// cloud (or a warm start), with the same seed in every forward simulation.
///
/// Stops when `m(mu_{k+1}, mu_k) < tol_fp * scale(mu_{k+1})`. Divergence (three
/// consecutive increases) and the iteration cap are reported through
/// [`EquilibriumResult::status`] with the full history; `strategy_star` is the
/// strategy that produced `mu_star`.
pub fn solve_equilibrium(
    problem: &Problem,
    initial: &InitialLaw,
    options: &EquilibriumOptions,
) -> Result<EquilibriumResult> {
    if initial.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), found: initial.dim() });
    }
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", options.damping)));
    }
    if options.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be positive".into()));
    }
    let backend = options.backend.unwrap_or(problem.natural_backend());
    if backend != problem.natural_backend() {
        return Err(Error::BackendMismatch(format!("{backend:?} backend cannot solve model '{}'", problem.name())));
    }
    let sim = options.sim();
    let cloud = initial.sample(options.n_particles, options.seed)?;
    let grid = uniform_grid(problem.horizon(), options.steps);
    let domain = match (problem, options.x_domain) {
        (Problem::General(_), Some(d)) => Some(d),
        (Problem::General(m), None) => Some(default_domain(m, initial, options.x_intervals)?),
        (Problem::Lq(_), _) => None,
    };
    let mut mu = match &options.warm_start {
        Some(c) => {
            if c.grid().len() != grid.len() || c.count() != cloud.count() {
                return Err(Error::GridMismatch("warm start does not match the grid or particle count".into()));
            }
            c.clone()
        }
        None => DistributionCurve::constant(grid, &cloud)?,
    };

    let mut history: Vec<IterationRecord> = Vec::new();
    let mut previous: Option<FeedbackStrategy> = None;
    let mut increases = 0;
    for iteration in 1..=options.max_iter {
        let mut strategy = solve_t2(problem, &problem.frozen(&mu)?, options, domain)?;
        if let (FeedbackStrategy::Affine(s), Some(FeedbackStrategy::Affine(p))) = (&mut strategy, &previous) {
            if options.damping < 1.0 {
                s.damp_offsets(p, options.damping);
            }
        }
        let (next, paths) = problem.simulate(&strategy, &cloud, &sim)?;
        let m_distance = curve_distance_m(&next, &mu)?;
        let tolerance = options.tol_fp * next.sup_second_moment().max(f64::MIN_POSITIVE);
        let last = history.last().map(|r| r.m_distance);
        let record = IterationRecord {
            iteration,
            m_distance,
            contraction_ratio: last.map(|d| ratio(m_distance, d)),
            strategy_delta: previous.as_ref().map(|p| strategy.sup_difference(p)),
            tolerance,
        };
        history.push(record);
        increases = match last {
            Some(d) if m_distance > d => increases + 1,
            _ => 0,
        };
        let status = if m_distance < tolerance {
            Some(Status::Converged)
        } else if increases >= 3 {
            Some(Status::Diverged)
        } else if iteration == options.max_iter {
            Some(Status::MaxIterations)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(EquilibriumResult {
                mu_star: next,
                strategy_star: strategy,
                paths,
                history,
                status,
                converged: status == Status::Converged,
                iterations: iteration,
                seed: options.seed,
                n_particles: options.n_particles,
                x_domain: domain,
            });
        }
        mu = next;
        previous = Some(strategy);
    }
    unreachable!("the loop returns at max_iter")
}

fn ratio(current: f64, last: f64) -> f64 {
    if last > 0.0 {
        current / last
    } else if current == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub m_distance: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `5 N^{-1/2} sup_t E|X*(t)|^2`.
pub fn consistency_tolerance(mu_star: &DistributionCurve) -> f64 {
    5.0 * (mu_star.count() as f64).powf(-0.5) * mu_star.sup_second_moment()
}

/// Re-simulates under `strategy_star` with fresh initial draws and noise from
/// `fresh_seed` and compares with `mu_star`.
pub fn consistency_check(
    result: &EquilibriumResult,
    problem: &Problem,
    initial: &InitialLaw,
    fresh_seed: u64,
    workers: Option<usize>,
) -> Result<ConsistencyReport> {
    let sim = SimOptions::new(result.n_particles, result.mu_star.steps(), fresh_seed).with_workers(workers);
    let cloud = initial.sample(result.n_particles, fresh_seed)?;
    let (curve, _) = problem.simulate(&result.strategy_star, &cloud, &sim)?;
    let m_distance = curve_distance_m(&curve, &result.mu_star)?;
    let tolerance = consistency_tolerance(&result.mu_star);
    Ok(ConsistencyReport { m_distance, tolerance, pass: m_distance <= tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub ratios: Vec<f64>,
    /// `exp` of the least-squares slope of `log d_k` over the positive distances.
    pub fitted_rate: f64,
    pub is_contraction: bool,
}

/// Ratio sequence and geometric fit of successive distances.
pub fn contraction_report(distances: &[f64]) -> Result<ContractionReport> {
    if distances.len() < 2 {
        return Err(Error::TooFewIterations(distances.len()));
    }
    let ratios: Vec<f64> = distances.windows(2).map(|w| ratio(w[1], w[0])).collect();
    let points: Vec<(f64, f64)> =
        distances.iter().enumerate().filter(|(_, d)| **d > 0.0).map(|(k, d)| (k as f64, d.ln())).collect();
    let fitted_rate = if points.len() >= 2 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (sxy / sxx).exp()
    } else {
        // at most one positive distance: the sequence hit zero
        0.0
    };
    let is_contraction = ratios.iter().all(|r| *r < 1.0);
    Ok(ContractionReport { ratios, fitted_rate, is_contraction })
}

fn shifted_psi(psi: &Psi, s: f64) -> Psi {
    match psi {
        Psi::ClosedForm(f) => {
            let f = f.clone();
            Psi::ClosedForm(Arc::new(move |t, x, q, out| f(t + s, x, q, out)))
        }
        Psi::Grid(g) => Psi::Grid(g.clone()),
    }
}

/// The problem on `[s, T]`, re-expressed on `[0, T - s]`.
pub fn restrict_problem(problem: &Problem, s: f64) -> Result<Problem> {
    if !(s >= 0.0 && s < problem.horizon()) {
        return Err(Error::InvalidParameter(format!("restriction time {s} outside [0, {})", problem.horizon())));
    }
    Ok(match problem {
        Problem::Lq(m) => {
            let mut r = m.clone();
            r.horizon = m.horizon - s;
            let f = m.state_matrix.clone();
            r.state_matrix = Arc::new(move |t| f(t + s));
            let f = m.control_matrix.clone();
            r.control_matrix = Arc::new(move |t| f(t + s));
            let f = m.drift_offset.clone();
            r.drift_offset = Arc::new(move |t, mv| f(t + s, mv));
            let f = m.noise.clone();
            r.noise = Arc::new(move |t, mv| f(t + s, mv));
            let f = m.state_weight.clone();
            r.state_weight = Arc::new(move |tau, t| f(tau + s, t + s));
            let f = m.control_weight.clone();
            r.control_weight = Arc::new(move |tau, t| f(tau + s, t + s));
            let f = m.terminal_weight.clone();
            r.terminal_weight = Arc::new(move |tau| f(tau + s));
            let f = m.running_offset.clone();
            r.running_offset = Arc::new(move |tau, t, mv| f(tau + s, t + s, mv));
            let f = m.terminal_offset.clone();
            r.terminal_offset = Arc::new(move |tau, mv| f(tau + s, mv));
            Problem::Lq(r)
        }
        Problem::General(m) => {
            let mut r = m.clone();
            r.horizon = m.horizon - s;
            let f = m.drift_state.clone();
            r.drift_state = Arc::new(move |t, x, mv| f(t + s, x, mv));
            let f = m.drift_control.clone();
            r.drift_control = Arc::new(move |t, x, v| f(t + s, x, v));
            let f = m.diffusion.clone();
            r.diffusion = Arc::new(move |t, x, mv| f(t + s, x, mv));
            let f = m.cost_state.clone();
            r.cost_state = Arc::new(move |tau, t, x, mv| f(tau + s, t + s, x, mv));
            let f = m.cost_control.clone();
            r.cost_control = Arc::new(move |tau, t, x, v| f(tau + s, t + s, x, v));
            let f = m.terminal.clone();
            r.terminal = Arc::new(move |tau, x, mv| f(tau + s, x, mv));
            r.psi = shifted_psi(&m.psi, s);
            Problem::General(r)
        }
    })
}

/// Zero strategy with the shape the problem's backend produces.
pub fn zero_strategy(problem: &Problem, steps: usize) -> FeedbackStrategy {
    let grid = uniform_grid(problem.horizon(), steps);
    let (d, l) = (problem.dim(), problem.control_dim());
    FeedbackStrategy::Affine(crate::strategy::AffineStrategy::new(
        grid.clone(),
        &vec![DMatrix::zeros(l, d); grid.len()],
        &vec![DVector::zeros(l); grid.len()],
    ))
}
