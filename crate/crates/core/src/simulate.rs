//! Particle simulation of the controlled McKean-Vlasov SDE.
//!
//! Every simulation here is Euler-Maruyama with one scalar Brownian increment
//! per particle per step, drawn from the particle's own counter-based stream.
//! The measure seen by the coefficients differs by entry point:
//!
//! * [`simulate_t1`]: the empirical measure of the cloud itself, recomputed at
//!   every step (the law map);
//! * [`picard_iterate_law`]: the law of the previous Picard iterate;
//! * [`simulate_frozen`]: a prescribed distribution curve;
//! * [`simulate_n_player`]: the leave-one-out empirical measure of the others.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{
    curve_distance_m, holder_profile, moments, uniform_grid, DistributionCurve, EmpiricalMeasure, Functional,
    MomentSums, MomentVector,
};
use crate::model::{LqModelSpec, ModelSpec};
use crate::rng::{stream, Domain};
use crate::strategy::Feedback;

/// Particles beyond this magnitude abort the run as a non-dissipative blow-up.
pub const BLOW_UP_LIMIT: f64 = 1e8;

/// Drift and diffusion of a controlled SDE driven by a scalar Brownian motion.
///
/// Coefficients are evaluated in two stages: [`Dynamics::frame`] freezes the
/// time and the measure once per step, and the per-particle calls reuse it.
pub trait Dynamics: Sync {
    type Frame: Send + Sync;

    fn dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn functionals(&self) -> &[Functional];
    fn frame(&self, t: f64, m: &MomentVector) -> Self::Frame;
    fn drift(&self, frame: &Self::Frame, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, frame: &Self::Frame, x: &[f64], out: &mut [f64]);
}

/// Time-inconsistent running and terminal costs indexed by `tau`.
pub trait CostModel: Dynamics {
    type CostFrame: Send + Sync;

    fn cost_frame(&self, tau: f64, t: f64, m: &MomentVector) -> Self::CostFrame;
    fn running_cost(&self, frame: &Self::CostFrame, x: &[f64], u: &[f64]) -> f64;
    /// Terminal cost; `frame` comes from `cost_frame(tau, T, m)`.
    fn terminal_cost(&self, frame: &Self::CostFrame, x: &[f64]) -> f64;
}

pub struct GeneralFrame {
    t: f64,
    m: MomentVector,
}

pub struct GeneralCostFrame {
    tau: f64,
    t: f64,
    m: MomentVector,
}

impl Dynamics for ModelSpec {
    type Frame = GeneralFrame;

    fn dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn functionals(&self) -> &[Functional] {
        &self.functionals
    }

    fn frame(&self, t: f64, m: &MomentVector) -> GeneralFrame {
        GeneralFrame { t, m: m.clone() }
    }

    fn drift(&self, f: &GeneralFrame, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = ModelSpec::drift(self, f.t, x[0], &f.m, u);
    }

    fn diffusion(&self, f: &GeneralFrame, x: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion)(f.t, x[0], &f.m);
    }
}

impl CostModel for ModelSpec {
    type CostFrame = GeneralCostFrame;

    fn cost_frame(&self, tau: f64, t: f64, m: &MomentVector) -> GeneralCostFrame {
        GeneralCostFrame { tau, t, m: m.clone() }
    }

    fn running_cost(&self, f: &GeneralCostFrame, x: &[f64], u: &[f64]) -> f64 {
        ModelSpec::running_cost(self, f.tau, f.t, x[0], &f.m, u)
    }

    fn terminal_cost(&self, f: &GeneralCostFrame, x: &[f64]) -> f64 {
        (self.terminal)(f.tau, x[0], &f.m)
    }
}

pub struct LqFrame {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    offset: DVector<f64>,
    noise: DVector<f64>,
}

pub struct LqCostFrame {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    f: f64,
    g: DMatrix<f64>,
    h: f64,
}

fn quad(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += x[i] * m[(i, j)] * x[j];
        }
    }
    acc
}

impl Dynamics for LqModelSpec {
    type Frame = LqFrame;

    fn dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn functionals(&self) -> &[Functional] {
        &self.functionals
    }

    fn frame(&self, t: f64, m: &MomentVector) -> LqFrame {
        LqFrame {
            a: (self.state_matrix)(t),
            b: (self.control_matrix)(t),
            offset: (self.drift_offset)(t, m),
            noise: (self.noise)(t, m),
        }
    }

    fn drift(&self, f: &LqFrame, x: &[f64], u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = f.offset[i];
            for (j, xj) in x.iter().enumerate() {
                acc += f.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += f.b[(i, j)] * uj;
            }
            *o = acc;
        }
    }

    fn diffusion(&self, f: &LqFrame, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(f.noise.as_slice());
    }
}

impl CostModel for LqModelSpec {
    type CostFrame = LqCostFrame;

    fn cost_frame(&self, tau: f64, t: f64, m: &MomentVector) -> LqCostFrame {
        LqCostFrame {
            q: (self.state_weight)(tau, t),
            r: (self.control_weight)(tau, t),
            f: (self.running_offset)(tau, t, m),
            g: (self.terminal_weight)(tau),
            h: (self.terminal_offset)(tau, m),
        }
    }

    fn running_cost(&self, f: &LqCostFrame, x: &[f64], u: &[f64]) -> f64 {
        quad(&f.q, x) + quad(&f.r, u) + f.f
    }

    fn terminal_cost(&self, f: &LqCostFrame, x: &[f64]) -> f64 {
        quad(&f.g, x) + f.h
    }
}

/// Initial law `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    Dirac { point: Vec<f64> },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// A given cloud, e.g. a node of an equilibrium curve for restarts. Sampling
    /// `n` equal to its size returns the cloud itself; other sizes resample.
    #[serde(skip)]
    Cloud(EmpiricalMeasure),
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
            InitialLaw::Cloud(m) => m.dim(),
        }
    }

    /// Mean and per-coordinate standard deviation.
    pub fn mean_sd(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            InitialLaw::Dirac { point } => (point.clone(), vec![0.0; point.len()]),
            InitialLaw::Gaussian { mean, sd } => (mean.clone(), sd.clone()),
            InitialLaw::Uniform { lower, upper } => (
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect(),
                lower.iter().zip(upper).map(|(a, b)| (b - a) / 12f64.sqrt()).collect(),
            ),
            InitialLaw::Cloud(m) => {
                let mv = moments(m, &[]);
                let d = m.dim();
                let mut var = vec![0.0; d];
                for p in m.points().chunks_exact(d) {
                    for c in 0..d {
                        var[c] += (p[c] - mv.mean[c]).powi(2);
                    }
                }
                (mv.mean, var.iter().map(|v| (v / m.count() as f64).sqrt()).collect())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            InitialLaw::Dirac { point } => !point.is_empty(),
            InitialLaw::Gaussian { mean, sd } => {
                !mean.is_empty() && mean.len() == sd.len() && sd.iter().all(|s| *s >= 0.0)
            }
            InitialLaw::Uniform { lower, upper } => {
                !lower.is_empty() && lower.len() == upper.len() && lower.iter().zip(upper).all(|(a, b)| a <= b)
            }
            InitialLaw::Cloud(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("malformed initial law {self:?}")))
        }
    }

    /// `n` independent draws; draw `i` uses stream `i` of the initial domain.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
        self.validate()?;
        let d = self.dim();
        if let InitialLaw::Cloud(m) = self {
            if m.count() == n {
                return Ok(m.clone());
            }
        }
        let mut points = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut rng = stream(seed, Domain::Initial, i as u64);
            match self {
                InitialLaw::Dirac { point } => points.extend_from_slice(point),
                InitialLaw::Gaussian { mean, sd } => {
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        points.push(mean[c] + sd[c] * z);
                    }
                }
                InitialLaw::Uniform { lower, upper } => {
                    for c in 0..d {
                        points.push(lower[c] + (upper[c] - lower[c]) * rng.random::<f64>());
                    }
                }
                InitialLaw::Cloud(m) => {
                    let j = rng.random_range(0..m.count());
                    points.extend_from_slice(m.point(j));
                }
            }
        }
        EmpiricalMeasure::new(d, points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_particles: usize,
    /// Number of time steps `K`; the step is `T / K`.
    pub steps: usize,
    pub seed: u64,
    /// Worker-count hint; results never depend on it.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl SimOptions {
    pub fn new(n_particles: usize, steps: usize, seed: u64) -> Self {
        Self { n_particles, steps, seed, workers: None }
    }

    pub fn with_workers(mut self, workers: Option<usize>) -> Self {
        self.workers = workers;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 particles, got {}", self.n_particles)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("need at least one time step".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Particle values on the grid, `[K+1][N][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePaths {
    pub grid: Vec<f64>,
    pub count: usize,
    pub dim: usize,
    pub seed: u64,
    pub strategy_id: String,
    pub values: Vec<f64>,
}

impl ParticlePaths {
    pub fn node(&self, k: usize) -> &[f64] {
        let n = self.count * self.dim;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn to_curve(&self) -> Result<DistributionCurve> {
        let measures = (0..self.grid.len())
            .map(|k| EmpiricalMeasure::new(self.dim, self.node(k).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        DistributionCurve::new(self.grid.clone(), measures)
    }

    /// Little-endian dump: header `K+1, N, d, seed` as `u64`, then the values as
    /// `f64` in `[K+1][N][d]` order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.grid.len() as u64, self.count as u64, self.dim as u64, self.seed] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`ParticlePaths::write_binary`]; the grid is
    /// rebuilt from the horizon.
    pub fn read_binary<R: Read>(mut input: R, horizon: f64) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [nodes, count, dim, seed] = header;
        if nodes < 2 || count == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!("bad path header {header:?}")));
        }
        let total = (nodes * count * dim) as usize;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Ok(Self {
            grid: uniform_grid(horizon, nodes as usize - 1),
            count: count as usize,
            dim: dim as usize,
            seed,
            strategy_id: String::new(),
            values,
        })
    }
}

enum MeasureSource<'a> {
    SelfConsistent,
    Prescribed(&'a [MomentVector]),
    LeaveOneOut,
}

struct Scratch {
    u: Vec<f64>,
    drift: Vec<f64>,
    noise: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, l: usize) -> Self {
        Self { u: vec![0.0; l], drift: vec![0.0; d], noise: vec![0.0; d] }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn em_step<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    frame: &M::Frame,
    strategy: &S,
    t: f64,
    h: f64,
    x: &mut [f64],
    rng: &mut ChaCha8Rng,
    sc: &mut Scratch,
) {
    strategy.control(t, x, &mut sc.u);
    model.drift(frame, x, &sc.u, &mut sc.drift);
    model.diffusion(frame, x, &mut sc.noise);
    let z: f64 = StandardNormal.sample(rng);
    let dw = h.sqrt() * z;
    for ((xc, b), s) in x.iter_mut().zip(&sc.drift).zip(&sc.noise) {
        *xc += b * h + s * dw;
    }
}

fn check_blow_up(x: &[f64], t: f64) -> Result<()> {
    let max_abs = x.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) });
    if !(max_abs <= BLOW_UP_LIMIT) {
        return Err(Error::BlowUp { t, max_abs });
    }
    Ok(())
}

/// Marches a cloud over the whole grid and returns all node values.
fn run_cloud<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    strategy: &S,
    initial: &EmpiricalMeasure,
    opts: &SimOptions,
    source: MeasureSource<'_>,
) -> Result<Vec<f64>> {
    let d = model.dim();
    if initial.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: initial.dim() });
    }
    if strategy.control_dim() != model.control_dim() {
        return Err(Error::DimensionMismatch { expected: model.control_dim(), found: strategy.control_dim() });
    }
    let l = model.control_dim();
    let n = initial.count();
    let grid = uniform_grid(model.horizon(), opts.steps);
    let h = model.horizon() / opts.steps as f64;
    let functionals = model.functionals();
    let mut x = initial.points().to_vec();
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream(opts.seed, Domain::Brownian, i as u64)).collect();
    let mut values = Vec::with_capacity((opts.steps + 1) * n * d);
    values.extend_from_slice(&x);
    for (k, &t) in grid.iter().enumerate().take(opts.steps) {
        match source {
            MeasureSource::SelfConsistent | MeasureSource::Prescribed(_) => {
                let m = match source {
                    MeasureSource::Prescribed(ms) => ms[k].clone(),
                    _ => MomentSums::accumulate(&x, d, functionals).average(n as f64),
                };
                let frame = model.frame(t, &m);
                x.par_chunks_mut(d).zip(rngs.par_iter_mut()).for_each_init(
                    || Scratch::new(d, l),
                    |sc, (xi, rng)| em_step(model, &frame, strategy, t, h, xi, rng, sc),
                );
            }
            MeasureSource::LeaveOneOut => {
                let sums = MomentSums::accumulate(&x, d, functionals);
                let rest = (n - 1) as f64;
                x.par_chunks_mut(d).zip(rngs.par_iter_mut()).for_each_init(
                    || Scratch::new(d, l),
                    |sc, (xi, rng)| {
                        let frame = model.frame(t, &sums.without(xi, functionals, rest));
                        em_step(model, &frame, strategy, t, h, xi, rng, sc)
                    },
                );
            }
        }
        check_blow_up(&x, grid[k + 1])?;
        values.extend_from_slice(&x);
    }
    Ok(values)
}

fn paths_from(values: Vec<f64>, grid: Vec<f64>, n: usize, d: usize, seed: u64, id: &str) -> ParticlePaths {
    ParticlePaths { grid, count: n, dim: d, seed, strategy_id: id.to_string(), values }
}

/// The law map: simulates the particle system in which each step sees the
/// empirical measure of the cloud, starting from `n_particles` draws of
/// `initial`. Bit-deterministic in `(seed, N, grid)`.
pub fn simulate_t1<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    strategy: &S,
    initial: &InitialLaw,
    opts: &SimOptions,
) -> Result<(DistributionCurve, ParticlePaths)> {
    opts.validate()?;
    let cloud = initial.sample(opts.n_particles, opts.seed)?;
    simulate_t1_from(model, strategy, &cloud, opts)
}

/// [`simulate_t1`] from an explicit initial cloud.
pub fn simulate_t1_from<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    strategy: &S,
    cloud: &EmpiricalMeasure,
    opts: &SimOptions,
) -> Result<(DistributionCurve, ParticlePaths)> {
    opts.validate()?;
    let values = with_workers(opts.workers, || run_cloud(model, strategy, cloud, opts, MeasureSource::SelfConsistent))??;
    let grid = uniform_grid(model.horizon(), opts.steps);
    let paths = paths_from(values, grid, cloud.count(), model.dim(), opts.seed, "t1");
    Ok((paths.to_curve()?, paths))
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub curve: DistributionCurve,
    /// `m(curve_n, curve_{n-1})` for `n = 1, 2, ...`.
    pub distances: Vec<f64>,
}

/// Picard iteration on laws: `X_{n+1}` is driven by `LAW(X_n)`, with the same
/// noise in every iterate, starting from the constant curve at the initial
/// cloud. Stops once successive curves are within `tol` in the uniform metric.
pub fn picard_iterate_law<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    strategy: &S,
    initial: &InitialLaw,
    opts: &SimOptions,
    tol: f64,
    max_iter: usize,
) -> Result<PicardOutcome> {
    opts.validate()?;
    let cloud = initial.sample(opts.n_particles, opts.seed)?;
    let grid = uniform_grid(model.horizon(), opts.steps);
    let mut curve = DistributionCurve::constant(grid.clone(), &cloud)?;
    let mut distances = Vec::new();
    for _ in 0..max_iter {
        let ms: Vec<MomentVector> = curve.measures().iter().map(|m| moments(m, model.functionals())).collect();
        let values = with_workers(opts.workers, || run_cloud(model, strategy, &cloud, opts, MeasureSource::Prescribed(&ms)))??;
        let next = paths_from(values, grid.clone(), cloud.count(), model.dim(), opts.seed, "picard").to_curve()?;
        let dist = curve_distance_m(&next, &curve)?;
        distances.push(dist);
        log_picard(distances.len(), dist);
        curve = next;
        if dist < tol {
            return Ok(PicardOutcome { curve, distances });
        }
    }
    Err(Error::MaxIterations(max_iter))
}

fn log_picard(_iteration: usize, _distance: f64) {}

/// `n_particles` symmetric players, each driven by the leave-one-out empirical
/// measure of the others and by its own Brownian motion.
pub fn simulate_n_player<M: Dynamics, S: Feedback + ?Sized>(
    model: &M,
    strategy: &S,
    initial: &InitialLaw,
    opts: &SimOptions,
) -> Result<DistributionCurve> {
    opts.validate()?;
    let cloud = initial.sample(opts.n_particles, opts.seed)?;
    let values = with_workers(opts.workers, || run_cloud(model, strategy, &cloud, opts, MeasureSource::LeaveOneOut))??;
    let grid = uniform_grid(model.horizon(), opts.steps);
    paths_from(values, grid, cloud.count(), model.dim(), opts.seed, "n_player").to_curve()
}

/// Moments of a prescribed curve, evaluated once for repeated frozen runs.
#[derive(Debug, Clone)]
pub struct FrozenCurve {
    grid: Vec<f64>,
    moments: Vec<MomentVector>,
}

impl FrozenCurve {
    pub fn new<M: Dynamics>(model: &M, curve: &DistributionCurve) -> Result<Self> {
        if (curve.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(Error::GridMismatch(format!(
                "curve ends at {} but the model horizon is {}",
                curve.horizon(),
                model.horizon()
            )));
        }
        let moments = curve.measures().par_iter().map(|m| moments(m, model.functionals())).collect();
        Ok(Self { grid: curve.grid().to_vec(), moments })
    }

    pub fn from_moments(grid: Vec<f64>, moments: Vec<MomentVector>) -> Self {
        Self { grid, moments }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn moments(&self) -> &[MomentVector] {
        &self.moments
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn step(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / self.steps() as f64
    }

    pub fn node_of(&self, t: f64) -> Option<usize> {
        let s = (t - self.grid[0]) / self.step();
        let r = s.round();
        ((s - r).abs() < 1e-9 && r >= 0.0 && (r as usize) <= self.steps()).then_some(r as usize)
    }
}

#[derive(Debug, Clone)]
pub enum FrozenStart {
    Point(Vec<f64>),
    /// Path `i` starts at point `i mod count` of the cloud.
    Cloud(EmpiricalMeasure),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCosts {
    pub running: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl FrozenCosts {
    pub fn totals(&self) -> Vec<f64> {
        self.running.iter().zip(&self.terminal).map(|(a, b)| a + b).collect()
    }
}

/// Paths of the SDE with the measure replaced by `frozen`, started at `t0`.
/// Returns per-path running cost (left-endpoint rule) and terminal cost for
/// the evaluation time `tau`. Path `i` uses stream `i` of the frozen domain,
/// so two controls run with the same seed share their noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frozen<M: CostModel, S: Feedback + ?Sized>(
    model: &M,
    control: &S,
    frozen: &FrozenCurve,
    tau: f64,
    t0: f64,
    start: &FrozenStart,
    n_paths: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<FrozenCosts> {
    let k0 = frozen.node_of(t0).ok_or(Error::OffGrid(t0))?;
    let steps = frozen.steps();
    if (frozen.grid[steps] - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::GridMismatch("frozen curve does not reach the horizon".into()));
    }
    if n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let d = model.dim();
    let l = model.control_dim();
    if control.control_dim() != l {
        return Err(Error::DimensionMismatch { expected: l, found: control.control_dim() });
    }
    let mut x = Vec::with_capacity(n_paths * d);
    match start {
        FrozenStart::Point(p) => {
            if p.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: p.len() });
            }
            for _ in 0..n_paths {
                x.extend_from_slice(p);
            }
        }
        FrozenStart::Cloud(c) => {
            if c.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: c.dim() });
            }
            for i in 0..n_paths {
                x.extend_from_slice(c.point(i % c.count()));
            }
        }
    }
    let h = frozen.step();
    let mut running = vec![0.0; n_paths];
    let mut rngs: Vec<ChaCha8Rng> = (0..n_paths).map(|i| stream(seed, Domain::Frozen, i as u64)).collect();
    with_workers(workers, || -> Result<()> {
        for k in k0..steps {
            let t = frozen.grid[k];
            let m = &frozen.moments[k];
            let frame = model.frame(t, m);
            let cframe = model.cost_frame(tau, t, m);
            x.par_chunks_mut(d).zip(rngs.par_iter_mut()).zip(running.par_iter_mut()).for_each_init(
                || Scratch::new(d, l),
                |sc, ((xi, rng), acc)| {
                    control.control(t, xi, &mut sc.u);
                    *acc += model.running_cost(&cframe, xi, &sc.u) * h;
                    em_step(model, &frame, control, t, h, xi, rng, sc);
                },
            );
            check_blow_up(&x, frozen.grid[k + 1])?;
        }
        Ok(())
    })??;
    let tframe = model.cost_frame(tau, frozen.grid[steps], &frozen.moments[steps]);
    let terminal = x.chunks_exact(d).map(|xi| model.terminal_cost(&tframe, xi)).collect();
    Ok(FrozenCosts { running, terminal })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentReport {
    /// `E sup_t |X(t)|^2`
    pub sup_second: f64,
    /// `E sup_t |X(t)|^{2 + delta}`
    pub sup_2plus: f64,
    /// [`holder_profile`] of the law of the paths.
    pub holder: f64,
}

pub fn moment_report(paths: &ParticlePaths, delta: f64) -> Result<MomentReport> {
    let (n, d) = (paths.count, paths.dim);
    let mut sup_sq = vec![0.0f64; n];
    for k in 0..paths.grid.len() {
        for (i, p) in paths.node(k).chunks_exact(d).enumerate() {
            sup_sq[i] = sup_sq[i].max(p.iter().map(|v| v * v).sum());
        }
    }
    let sup_second = sup_sq.iter().sum::<f64>() / n as f64;
    let sup_2plus = sup_sq.iter().map(|s| s.powf(1.0 + 0.5 * delta)).sum::<f64>() / n as f64;
    let holder = holder_profile(&paths.to_curve()?);
    Ok(MomentReport { sup_second, sup_2plus, holder })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{FnFeedback, ZeroFeedback};

    fn brownian() -> ModelSpec {
        ModelSpec::new("brownian", 1.0, 1).unwrap().with_diffusion(|_, _, _| 1.0)
    }

    #[test]
    fn rejects_tiny_clouds() {
        let opts = SimOptions::new(1, 10, 0);
        assert!(simulate_t1(&brownian(), &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![0.0] }, &opts).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let explosive = ModelSpec::new("boom", 1.0, 1).unwrap().with_drift_state(|_, x, _| 1e3 * x);
        let opts = SimOptions::new(4, 50, 0);
        let err = simulate_t1(&explosive, &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![1.0] }, &opts);
        assert!(matches!(err, Err(Error::BlowUp { .. })), "{err:?}");
    }

    #[test]
    fn initial_row_matches_sampler() {
        let law = InitialLaw::Gaussian { mean: vec![2.0], sd: vec![0.5] };
        let opts = SimOptions::new(64, 4, 9);
        let (curve, paths) = simulate_t1(&brownian(), &ZeroFeedback(1), &law, &opts).unwrap();
        assert_eq!(curve.measure(0), &law.sample(64, 9).unwrap());
        assert_eq!(paths.node(0), law.sample(64, 9).unwrap().points());
    }

    #[test]
    fn worker_count_does_not_change_paths() {
        let model = brownian().with_drift_state(|_, x, m| -x + 0.5 * m.mean[0]);
        let law = InitialLaw::Gaussian { mean: vec![1.0], sd: vec![1.0] };
        let run = |w| {
            let opts = SimOptions::new(500, 40, 3).with_workers(Some(w));
            simulate_t1(&model, &ZeroFeedback(1), &law, &opts).unwrap().1
        };
        let a = run(1);
        assert_eq!(a.values, run(3).values);
        assert_eq!(a.values, run(8).values);
    }

    #[test]
    fn binary_round_trip() {
        let opts = SimOptions::new(8, 5, 77);
        let (_, paths) = simulate_t1(&brownian(), &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![0.0] }, &opts).unwrap();
        let mut buf = Vec::new();
        paths.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 6 * 8 * 8);
        assert_eq!(&buf[0..8], &6u64.to_le_bytes());
        assert_eq!(&buf[24..32], &77u64.to_le_bytes());
        let back = ParticlePaths::read_binary(&buf[..], 1.0).unwrap();
        assert_eq!(back.values, paths.values);
        assert_eq!(back.grid, paths.grid);
    }

    #[test]
    fn frozen_constant_costs() {
        let zero = ModelSpec::new("z", 2.0, 1).unwrap().with_diffusion(|_, _, _| 1.0);
        let curve = DistributionCurve::constant(uniform_grid(2.0, 20), &EmpiricalMeasure::from_scalars(vec![0.0, 1.0]).unwrap()).unwrap();
        let frozen = FrozenCurve::new(&zero, &curve).unwrap();
        let c = simulate_frozen(&zero, &ZeroFeedback(1), &frozen, 0.0, 0.5, &FrozenStart::Point(vec![1.0]), 16, 1, None).unwrap();
        assert!(c.totals().iter().all(|v| *v == 0.0));
        let unit = zero.clone().with_cost_state(|_, _, _, _| 1.0);
        let c = simulate_frozen(&unit, &ZeroFeedback(1), &frozen, 0.0, 0.5, &FrozenStart::Point(vec![1.0]), 16, 1, None).unwrap();
        assert!(c.totals().iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(matches!(
            simulate_frozen(&unit, &ZeroFeedback(1), &frozen, 0.0, 0.55, &FrozenStart::Point(vec![1.0]), 4, 1, None),
            Err(Error::OffGrid(_))
        ));
    }

    #[test]
    fn frozen_shares_noise_across_controls() {
        let model = brownian().with_cost_state(|_, _, x, _| x * x);
        let curve = DistributionCurve::constant(uniform_grid(1.0, 10), &EmpiricalMeasure::from_scalars(vec![0.0, 1.0]).unwrap()).unwrap();
        let frozen = FrozenCurve::new(&model, &curve).unwrap();
        let a = simulate_frozen(&model, &ZeroFeedback(1), &frozen, 0.0, 0.0, &FrozenStart::Point(vec![0.0]), 32, 5, None).unwrap();
        let other = FnFeedback::new(1, |_, _, u: &mut [f64]| u[0] = 0.0);
        let b = simulate_frozen(&model, &other, &frozen, 0.0, 0.0, &FrozenStart::Point(vec![0.0]), 32, 5, Some(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn picard_independent_model_is_immediate() {
        let law = InitialLaw::Gaussian { mean: vec![0.0], sd: vec![1.0] };
        let opts = SimOptions::new(200, 20, 4);
        let out = picard_iterate_law(&brownian(), &ZeroFeedback(1), &law, &opts, 1e-12, 5).unwrap();
        assert_eq!(out.distances.len(), 2);
        assert_eq!(out.distances[1], 0.0);
        let (t1, _) = simulate_t1(&brownian(), &ZeroFeedback(1), &law, &opts).unwrap();
        assert_eq!(out.curve, t1);
    }

    #[test]
    fn n_player_two_independent_players() {
        let law = InitialLaw::Dirac { point: vec![0.0] };
        let opts = SimOptions::new(2, 10, 8);
        let game = simulate_n_player(&brownian(), &ZeroFeedback(1), &law, &opts).unwrap();
        let (single, _) = simulate_t1(&brownian(), &ZeroFeedback(1), &law, &opts).unwrap();
        assert_eq!(game, single);
    }

    #[test]
    fn moment_report_examples() {
        let still = ModelSpec::new("still", 1.0, 1).unwrap();
        let opts = SimOptions::new(10, 10, 0);
        let (_, paths) = simulate_t1(&still, &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![0.0] }, &opts).unwrap();
        let r = moment_report(&paths, 1.0).unwrap();
        assert_eq!((r.sup_second, r.sup_2plus, r.holder), (0.0, 0.0, 0.0));
    }
}
