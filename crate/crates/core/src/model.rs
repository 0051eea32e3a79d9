//! Problem declarations.
//!
//! [`ModelSpec`] is the general one-dimensional model used by the HJB solver. Its
//! drift and running cost are stored split into a measure-dependent part and a
//! control-dependent part, so the feedback map `psi` never sees the measure.
//! [`LqModelSpec`] is the semi-linear model with quadratic costs handled by the
//! Riccati solver, in any state dimension.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{Functional, MomentVector};
use crate::rng::{stream, Domain};
use crate::simulate::InitialLaw;

/// `(t, x, m) -> value`, used for the measure-dependent drift and the diffusion.
pub type StateCoef = Arc<dyn Fn(f64, f64, &MomentVector) -> f64 + Send + Sync>;
/// `(t, x, v) -> value`, the control-dependent drift.
pub type ControlCoef = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
/// `(tau, t, x, m) -> value`, the measure-dependent running cost.
pub type StateCost = Arc<dyn Fn(f64, f64, f64, &MomentVector) -> f64 + Send + Sync>;
/// `(tau, t, x, v) -> value`, the control-dependent running cost.
pub type ControlCost = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
/// `(tau, x, m) -> value`, the terminal cost.
pub type TerminalCost = Arc<dyn Fn(f64, f64, &MomentVector) -> f64 + Send + Sync>;
/// Closed-form feedback map `(t, x, q, out)`.
pub type PsiFn = Arc<dyn Fn(f64, f64, f64, &mut [f64]) + Send + Sync>;

/// Uniform tensor grid over a box of controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

impl ControlGrid {
    pub const DEFAULT_POINTS: usize = 201;

    pub fn symmetric(control_dim: usize, bound: f64, points: usize) -> Self {
        Self { lower: vec![-bound; control_dim], upper: vec![bound; control_dim], points }
    }

    fn value(&self, axis: usize, i: usize) -> f64 {
        if self.points == 1 {
            return 0.5 * (self.lower[axis] + self.upper[axis]);
        }
        let w = i as f64 / (self.points - 1) as f64;
        self.lower[axis] + w * (self.upper[axis] - self.lower[axis])
    }
}

#[derive(Clone)]
pub enum Psi {
    ClosedForm(PsiFn),
    Grid(ControlGrid),
}

impl fmt::Debug for Psi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psi::ClosedForm(_) => f.write_str("Psi::ClosedForm"),
            Psi::Grid(g) => f.debug_tuple("Psi::Grid").field(g).finish(),
        }
    }
}

/// General model with a one-dimensional state and a scalar Brownian motion.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub horizon: f64,
    pub control_dim: usize,
    pub drift_state: StateCoef,
    pub drift_control: ControlCoef,
    pub diffusion: StateCoef,
    pub cost_state: StateCost,
    pub cost_control: ControlCost,
    pub terminal: TerminalCost,
    pub psi: Psi,
    pub functionals: Vec<Functional>,
    /// Declared Lipschitz constant of the coefficients.
    pub kappa0: Option<f64>,
    /// Declared Lipschitz constant of `psi`.
    pub beta_psi: Option<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("control_dim", &self.control_dim)
            .field("psi", &self.psi)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Model with every coefficient zero and a grid argmin for `psi`.
    pub fn new(name: impl Into<String>, horizon: f64, control_dim: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if control_dim == 0 {
            return Err(Error::InvalidParameter("control dimension must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            horizon,
            control_dim,
            drift_state: Arc::new(|_, _, _| 0.0),
            drift_control: Arc::new(|_, _, _| 0.0),
            diffusion: Arc::new(|_, _, _| 0.0),
            cost_state: Arc::new(|_, _, _, _| 0.0),
            cost_control: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_, _, _| 0.0),
            psi: Psi::Grid(ControlGrid::symmetric(control_dim, 5.0, ControlGrid::DEFAULT_POINTS)),
            functionals: Vec::new(),
            kappa0: None,
            beta_psi: None,
        })
    }

    pub fn with_drift_state(mut self, f: impl Fn(f64, f64, &MomentVector) -> f64 + Send + Sync + 'static) -> Self {
        self.drift_state = Arc::new(f);
        self
    }

    pub fn with_drift_control(mut self, f: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.drift_control = Arc::new(f);
        self
    }

    pub fn with_diffusion(mut self, f: impl Fn(f64, f64, &MomentVector) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_cost_state(
        mut self,
        f: impl Fn(f64, f64, f64, &MomentVector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.cost_state = Arc::new(f);
        self
    }

    pub fn with_cost_control(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_control = Arc::new(f);
        self
    }

    pub fn with_terminal(mut self, f: impl Fn(f64, f64, &MomentVector) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_psi_closed_form(mut self, f: impl Fn(f64, f64, f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.psi = Psi::ClosedForm(Arc::new(f));
        self
    }

    pub fn with_psi_grid(mut self, grid: ControlGrid) -> Self {
        self.psi = Psi::Grid(grid);
        self
    }

    pub fn with_functional(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.functionals.push(Arc::new(f));
        self
    }

    pub fn with_lipschitz(mut self, kappa0: Option<f64>, beta_psi: Option<f64>) -> Self {
        self.kappa0 = kappa0;
        self.beta_psi = beta_psi;
        self
    }

    pub fn drift(&self, t: f64, x: f64, m: &MomentVector, v: &[f64]) -> f64 {
        (self.drift_state)(t, x, m) + (self.drift_control)(t, x, v)
    }

    pub fn running_cost(&self, tau: f64, t: f64, x: f64, m: &MomentVector, v: &[f64]) -> f64 {
        (self.cost_state)(tau, t, x, m) + (self.cost_control)(tau, t, x, v)
    }
}

/// `psi(t, x, q) = argmin_v { q * a2(t, x, v) + f2(t; t, x, v) }`.
pub fn eval_psi(model: &ModelSpec, t: f64, x: f64, q: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.control_dim];
    eval_psi_into(model, t, x, q, &mut out)?;
    Ok(out)
}

pub fn eval_psi_into(model: &ModelSpec, t: f64, x: f64, q: f64, out: &mut [f64]) -> Result<()> {
    if !(-1e-12..=model.horizon * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::InvalidParameter(format!("t = {t} outside [0, {}]", model.horizon)));
    }
    match &model.psi {
        Psi::ClosedForm(f) => {
            f(t, x, q, out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("psi({t}, {x}, {q})")));
            }
            Ok(())
        }
        Psi::Grid(grid) => grid_argmin(model, grid, t, x, q, out),
    }
}

fn grid_argmin(model: &ModelSpec, grid: &ControlGrid, t: f64, x: f64, q: f64, out: &mut [f64]) -> Result<()> {
    let l = model.control_dim;
    if grid.points == 0 || grid.lower.len() != l || grid.upper.len() != l {
        return Err(Error::InvalidParameter("empty or mis-shaped control grid".into()));
    }
    let total = grid.points.checked_pow(l as u32).ok_or_else(|| Error::InvalidParameter("control grid too large".into()))?;
    let mut idx = vec![0usize; l];
    let mut v = vec![0.0; l];
    let mut best = f64::INFINITY;
    for flat in 0..total {
        let mut rest = flat;
        // last axis varies fastest: lexicographic order, smallest index wins ties
        for axis in (0..l).rev() {
            idx[axis] = rest % grid.points;
            rest /= grid.points;
        }
        for axis in 0..l {
            v[axis] = grid.value(axis, idx[axis]);
        }
        let obj = q * (model.drift_control)(t, x, &v) + (model.cost_control)(t, t, x, &v);
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("psi objective at v = {v:?}")));
        }
        if obj < best {
            best = obj;
            out.copy_from_slice(&v);
        }
    }
    Ok(())
}

/// Box over which [`lipschitz_probe`] samples pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub q: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub drift: f64,
    pub diffusion: f64,
    pub psi: f64,
    pub warnings: Vec<String>,
}

/// Largest finite-difference ratios of the drift and diffusion (in `x`, with the
/// control at zero and the measure fixed at the box centre) and of `psi`
/// (in `(x, q)`), over `n_samples` random pairs.
pub fn lipschitz_probe(model: &ModelSpec, n_samples: usize, bx: ProbeBox, seed: u64) -> Result<LipschitzReport> {
    let finite = [bx.t.0, bx.t.1, bx.x.0, bx.x.1, bx.q.0, bx.q.1].iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidParameter("probe box must be finite".into()));
    }
    let mut rng = stream(seed, Domain::Lipschitz, 0);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let centre = 0.5 * (bx.x.0 + bx.x.1);
    let m = MomentVector::of_point(&[centre], &model.functionals);
    let zero = vec![0.0; model.control_dim];
    let (mut drift, mut diffusion, mut psi) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_samples {
        let t = draw(bx.t);
        let (x1, x2) = (draw(bx.x), draw(bx.x));
        let (q1, q2) = (draw(bx.q), draw(bx.q));
        let dx = (x1 - x2).abs();
        if dx > 0.0 {
            drift = drift.max((model.drift(t, x1, &m, &zero) - model.drift(t, x2, &m, &zero)).abs() / dx);
            diffusion = diffusion.max(((model.diffusion)(t, x1, &m) - (model.diffusion)(t, x2, &m)).abs() / dx);
        }
        let den = dx + (q1 - q2).abs();
        if den > 0.0 {
            let p1 = eval_psi(model, t, x1, q1)?;
            let p2 = eval_psi(model, t, x2, q2)?;
            let num = p1.iter().zip(&p2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            psi = psi.max(num / den);
        }
    }
    let mut warnings = Vec::new();
    if let Some(k) = model.kappa0 {
        for (label, r) in [("drift", drift), ("diffusion", diffusion)] {
            if r > 1.1 * k {
                warnings.push(format!("{label} ratio {r:.4} exceeds declared kappa0 = {k}"));
            }
        }
    }
    if let Some(b) = model.beta_psi {
        if psi > 1.1 * b {
            warnings.push(format!("psi ratio {psi:.4} exceeds declared beta_psi = {b}"));
        }
    }
    Ok(LipschitzReport { drift, diffusion, psi, warnings })
}

pub type TimeMatrix = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type TwoTimeMatrix = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
pub type MeasureVector = Arc<dyn Fn(f64, &MomentVector) -> DVector<f64> + Send + Sync>;
pub type TwoTimeMeasureScalar = Arc<dyn Fn(f64, f64, &MomentVector) -> f64 + Send + Sync>;
pub type MeasureScalar = Arc<dyn Fn(f64, &MomentVector) -> f64 + Send + Sync>;

/// Semi-linear model
///
/// ```text
/// dX = [A(t) X + B(t) u + a(t, rho)] dt + b(t, rho) dW      (W scalar)
/// f(tau; t, x, u, rho) = <x, Q(tau; t) x> + <u, R(tau; t) u> + F(tau; t, rho)
/// g(tau; x, rho)       = <x, G(tau) x> + H(tau; rho)
/// ```
#[derive(Clone)]
pub struct LqModelSpec {
    pub name: String,
    pub dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub state_matrix: TimeMatrix,
    pub control_matrix: TimeMatrix,
    pub drift_offset: MeasureVector,
    pub noise: MeasureVector,
    pub state_weight: TwoTimeMatrix,
    pub control_weight: TwoTimeMatrix,
    pub terminal_weight: TimeMatrix,
    pub running_offset: TwoTimeMeasureScalar,
    pub terminal_offset: MeasureScalar,
    pub functionals: Vec<Functional>,
    /// Declared dissipativity margin: every eigenvalue of `A(t)` has real part
    /// at most `-L0`.
    pub dissipativity: Option<f64>,
}

impl fmt::Debug for LqModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LqModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("dissipativity", &self.dissipativity)
            .finish_non_exhaustive()
    }
}

impl LqModelSpec {
    /// All-zero model with `R = I`.
    pub fn new(name: impl Into<String>, dim: usize, control_dim: usize, horizon: f64) -> Result<Self> {
        if dim == 0 || control_dim == 0 {
            return Err(Error::InvalidParameter("dimensions must be positive".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            control_dim,
            horizon,
            state_matrix: Arc::new(move |_| DMatrix::zeros(dim, dim)),
            control_matrix: Arc::new(move |_| DMatrix::zeros(dim, control_dim)),
            drift_offset: Arc::new(move |_, _| DVector::zeros(dim)),
            noise: Arc::new(move |_, _| DVector::zeros(dim)),
            state_weight: Arc::new(move |_, _| DMatrix::zeros(dim, dim)),
            control_weight: Arc::new(move |_, _| DMatrix::identity(control_dim, control_dim)),
            terminal_weight: Arc::new(move |_| DMatrix::zeros(dim, dim)),
            running_offset: Arc::new(|_, _, _| 0.0),
            terminal_offset: Arc::new(|_, _| 0.0),
            functionals: Vec::new(),
            dissipativity: None,
        })
    }

    /// Checks shapes, symmetry of `Q`, `R`, `G` to 1e-12, `R(t; t) > 0` and
    /// `G(tau) >= 0` on the uniform grid with `steps` intervals.
    pub fn validate(&self, steps: usize) -> Result<()> {
        let (d, l) = (self.dim, self.control_dim);
        let grid = crate::measures::uniform_grid(self.horizon, steps);
        let sym = |m: &DMatrix<f64>, what: &str, k: usize| -> Result<()> {
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 * m.amax().max(1.0) {
                return Err(Error::InvalidParameter(format!("{what} not symmetric at node {k} (gap {asym:e})")));
            }
            Ok(())
        };
        let shape = |m: &DMatrix<f64>, r: usize, c: usize, what: &str| -> Result<()> {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::InvalidParameter(format!(
                    "{what} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        // tau sweep is thinned on long grids; the diagonal is always checked
        let stride = (steps / 64).max(1);
        for (k, &t) in grid.iter().enumerate() {
            shape(&(self.state_matrix)(t), d, d, "A")?;
            shape(&(self.control_matrix)(t), d, l, "B")?;
            let r = (self.control_weight)(t, t);
            shape(&r, l, l, "R")?;
            sym(&r, "R(t;t)", k)?;
            if r.clone().cholesky().is_none() {
                return Err(Error::Singular { node: k, what: "R(t;t) is not positive definite".into() });
            }
            let g = (self.terminal_weight)(t);
            shape(&g, d, d, "G")?;
            sym(&g, "G", k)?;
            let min_eig = g.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-12 {
                return Err(Error::InvalidParameter(format!("G(tau) not positive semidefinite at node {k}")));
            }
            for (j, &tau) in grid.iter().enumerate().take(k + 1) {
                if j % stride != 0 && j != k {
                    continue;
                }
                let q = (self.state_weight)(tau, t);
                shape(&q, d, d, "Q")?;
                sym(&q, "Q", k)?;
                sym(&(self.control_weight)(tau, t), "R", k)?;
            }
        }
        Ok(())
    }

    /// Largest real part of the eigenvalues of `A(t)` over the grid.
    pub fn max_real_eigenvalue(&self, steps: usize) -> f64 {
        crate::measures::uniform_grid(self.horizon, steps)
            .iter()
            .map(|&t| {
                (self.state_matrix)(t)
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.re)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqCatalog {
    /// `tau`-independent weights: the classical LQ problem with a mean-field drift.
    TimeConsistentBaseline,
    /// `A = -L0 I + A0`, mean coupling `a = c * mean`, hyperbolic discounting.
    DissipativeMeanfield,
    /// `tau`-independent running cost with terminal weight `e^{-rate (T - tau)} g`.
    TauWeightedTerminal,
}

impl LqCatalog {
    pub const ALL: [LqCatalog; 3] =
        [LqCatalog::TimeConsistentBaseline, LqCatalog::DissipativeMeanfield, LqCatalog::TauWeightedTerminal];

    pub fn name(self) -> &'static str {
        match self {
            LqCatalog::TimeConsistentBaseline => "time_consistent_baseline",
            LqCatalog::DissipativeMeanfield => "dissipative_meanfield",
            LqCatalog::TauWeightedTerminal => "tau_weighted_terminal",
        }
    }

    /// Initial law used when a configuration does not name one.
    pub fn default_initial(self, params: &CatalogParams) -> InitialLaw {
        let dim = params.dim;
        match self {
            LqCatalog::DissipativeMeanfield => InitialLaw::Gaussian { mean: vec![1.0; dim], sd: vec![0.5; dim] },
            _ => InitialLaw::Gaussian { mean: vec![0.0; dim], sd: vec![1.0; dim] },
        }
    }
}

impl fmt::Display for LqCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LqCatalog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LqCatalog::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown catalog model '{s}'")))
    }
}

/// Numeric parameters of the LQ catalog. Matrices are multiples of the identity
/// (`B` and `R` are `d x d`, so `l = d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogParams {
    pub dim: usize,
    pub horizon: f64,
    /// `A0`: added to `-L0` for the dissipative model, the whole of `A` otherwise.
    pub drift: f64,
    pub control_gain: f64,
    pub state_weight: Option<f64>,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub sigma: f64,
    /// `c` in `a(t, rho) = c * mean(rho) + offset`.
    pub coupling: f64,
    pub offset: f64,
    pub l0: f64,
    /// Discount rate: hyperbolic for the dissipative model, exponential for the
    /// terminal weight of `tau_weighted_terminal`.
    pub discount: f64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        Self {
            dim: 1,
            horizon: 1.0,
            drift: 0.0,
            control_gain: 1.0,
            state_weight: None,
            control_weight: 1.0,
            terminal_weight: 1.0,
            sigma: 1.0,
            coupling: 0.0,
            offset: 0.0,
            l0: 10.0,
            discount: 1.0,
        }
    }
}

pub fn build_lq_catalog(name: LqCatalog, params: &CatalogParams) -> Result<LqModelSpec> {
    let p = params.clone();
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    if p.dim == 0 {
        return bad("dim must be positive".into());
    }
    if !(p.horizon > 0.0) {
        return bad(format!("horizon must be positive, got {}", p.horizon));
    }
    if !(p.control_weight > 0.0) {
        return bad(format!("control_weight must be positive, got {}", p.control_weight));
    }
    if p.terminal_weight < 0.0 || p.sigma < 0.0 || p.discount < 0.0 {
        return bad("terminal_weight, sigma and discount must be nonnegative".into());
    }
    let q = p.state_weight.unwrap_or(match name {
        LqCatalog::DissipativeMeanfield => 1.0,
        _ => 0.0,
    });
    if q < 0.0 {
        return bad(format!("state_weight must be nonnegative, got {q}"));
    }
    if name == LqCatalog::DissipativeMeanfield && !(p.l0 > 0.0) {
        return bad(format!("dissipativity margin L0 must be positive, got {}", p.l0));
    }

    let d = p.dim;
    let horizon = p.horizon;
    let mut lq = LqModelSpec::new(name.name(), d, d, horizon)?;
    let a_diag = match name {
        LqCatalog::DissipativeMeanfield => p.drift - p.l0,
        _ => p.drift,
    };
    let gain = p.control_gain;
    lq.state_matrix = Arc::new(move |_| DMatrix::from_diagonal_element(d, d, a_diag));
    lq.control_matrix = Arc::new(move |_| DMatrix::from_diagonal_element(d, d, gain));
    let (c, offset, sigma) = (p.coupling, p.offset, p.sigma);
    lq.drift_offset = Arc::new(move |_, m| DVector::from_iterator(d, m.mean.iter().map(|v| c * v + offset)));
    lq.noise = Arc::new(move |_, _| DVector::from_element(d, sigma));
    let (r, g, rate) = (p.control_weight, p.terminal_weight, p.discount);
    match name {
        LqCatalog::TimeConsistentBaseline => {
            lq.state_weight = Arc::new(move |_, _| DMatrix::from_diagonal_element(d, d, q));
            lq.control_weight = Arc::new(move |_, _| DMatrix::from_diagonal_element(d, d, r));
            lq.terminal_weight = Arc::new(move |_| DMatrix::from_diagonal_element(d, d, g));
        }
        LqCatalog::DissipativeMeanfield => {
            let w = move |tau: f64, t: f64| 1.0 / (1.0 + rate * (t - tau).max(0.0));
            lq.state_weight = Arc::new(move |tau, t| DMatrix::from_diagonal_element(d, d, q * w(tau, t)));
            lq.control_weight = Arc::new(move |tau, t| DMatrix::from_diagonal_element(d, d, r * w(tau, t)));
            lq.terminal_weight = Arc::new(move |tau| DMatrix::from_diagonal_element(d, d, g * w(tau, horizon)));
            lq.dissipativity = Some(p.l0);
        }
        LqCatalog::TauWeightedTerminal => {
            lq.state_weight = Arc::new(move |_, _| DMatrix::from_diagonal_element(d, d, q));
            lq.control_weight = Arc::new(move |_, _| DMatrix::from_diagonal_element(d, d, r));
            lq.terminal_weight =
                Arc::new(move |tau| DMatrix::from_diagonal_element(d, d, g * (-rate * (horizon - tau)).exp()));
        }
    }
    Ok(lq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model() -> ModelSpec {
        ModelSpec::new("quad", 1.0, 1)
            .unwrap()
            .with_drift_control(|_, _, v| v[0])
            .with_cost_control(|_, _, _, v| v[0] * v[0])
    }

    #[test]
    fn psi_scalar_quadratic() {
        // argmin q v + v^2 = -q/2; the grid step is 0.05 so -0.5 is a node
        let m = scalar_model();
        let v = eval_psi(&m, 0.3, 1.0, 1.0).unwrap();
        assert!((v[0] + 0.5).abs() < 1e-12);
        let v = eval_psi(&m, 0.3, 1.0, 0.0).unwrap();
        assert!(v[0].abs() < 1e-12);
        let closed = scalar_model().with_psi_closed_form(|_, _, q, out| out[0] = -q / 2.0);
        assert_eq!(eval_psi(&closed, 0.0, 0.0, 0.7).unwrap(), vec![-0.35]);
    }

    #[test]
    fn psi_lq_structure_matches_closed_form() {
        // a2 = 2 B v, f2 = R v^2  =>  psi = -B q / R
        let (b, r) = (1.5, 2.0);
        let grid = ControlGrid::symmetric(1, 3.0, 601);
        let m = ModelSpec::new("lq", 1.0, 1)
            .unwrap()
            .with_drift_control(move |_, _, v| 2.0 * b * v[0])
            .with_cost_control(move |_, _, _, v| r * v[0] * v[0])
            .with_psi_grid(grid);
        for q in [-1.2, 0.0, 0.4, 1.6] {
            let v = eval_psi(&m, 0.5, 0.0, q).unwrap()[0];
            assert!((v + b * q / r).abs() <= 0.005 + 1e-12, "q = {q}: {v}");
        }
    }

    #[test]
    fn psi_tie_break_and_errors() {
        // constant objective: every node ties, smallest index is the lower bound
        let flat = ModelSpec::new("flat", 1.0, 1).unwrap();
        assert_eq!(eval_psi(&flat, 0.0, 0.0, 1.0).unwrap(), vec![-5.0]);
        let empty = ModelSpec::new("e", 1.0, 1).unwrap().with_psi_grid(ControlGrid::symmetric(1, 1.0, 0));
        assert!(eval_psi(&empty, 0.0, 0.0, 0.0).is_err());
        let nan = scalar_model().with_cost_control(|_, _, _, _| f64::NAN);
        assert!(matches!(eval_psi(&nan, 0.0, 0.0, 0.0), Err(Error::NonFinite(_))));
        assert!(eval_psi(&scalar_model(), 2.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn psi_invariant_under_constant_shift() {
        let shifted = scalar_model().with_cost_control(|_, _, x, v| v[0] * v[0] + 3.0 + x.sin());
        for q in [-2.0, -0.3, 0.9] {
            assert_eq!(eval_psi(&scalar_model(), 0.1, 0.4, q).unwrap(), eval_psi(&shifted, 0.1, 0.4, q).unwrap());
        }
    }

    #[test]
    fn two_dimensional_control_grid() {
        let m = ModelSpec::new("2d", 1.0, 2)
            .unwrap()
            .with_drift_control(|_, _, v| v[0] + 2.0 * v[1])
            .with_cost_control(|_, _, _, v| v[0] * v[0] + v[1] * v[1])
            .with_psi_grid(ControlGrid::symmetric(2, 2.0, 41));
        let v = eval_psi(&m, 0.0, 0.0, 1.0).unwrap();
        assert!((v[0] + 0.5).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn catalog_construction() {
        let base = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &CatalogParams::default()).unwrap();
        assert_eq!((base.state_weight)(0.0, 0.5), (base.state_weight)(0.5, 0.5));
        assert_eq!((base.terminal_weight)(0.0)[(0, 0)], 1.0);
        base.validate(50).unwrap();

        let params = CatalogParams { l0: 10.0, coupling: 0.5, ..Default::default() };
        let diss = build_lq_catalog(LqCatalog::DissipativeMeanfield, &params).unwrap();
        assert_eq!((diss.state_matrix)(0.3)[(0, 0)], -10.0);
        let m = MomentVector { mean: vec![2.0], second_moment: 4.0, generalized: vec![] };
        assert_eq!((diss.drift_offset)(0.0, &m)[0], 1.0);
        assert!(diss.max_real_eigenvalue(10) <= -10.0);
        diss.validate(50).unwrap();

        let tw = build_lq_catalog(LqCatalog::TauWeightedTerminal, &CatalogParams { terminal_weight: 2.0, ..Default::default() })
            .unwrap();
        assert!(((tw.terminal_weight)(0.0)[(0, 0)] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!((tw.terminal_weight)(1.0)[(0, 0)], 2.0);
    }

    #[test]
    fn catalog_rejects_out_of_range() {
        let p = CatalogParams { l0: 0.0, ..Default::default() };
        assert!(build_lq_catalog(LqCatalog::DissipativeMeanfield, &p).is_err());
        let p = CatalogParams { control_weight: 0.0, ..Default::default() };
        assert!(build_lq_catalog(LqCatalog::TimeConsistentBaseline, &p).is_err());
        assert!("nope".parse::<LqCatalog>().is_err());
        assert_eq!("tau_weighted_terminal".parse::<LqCatalog>().unwrap(), LqCatalog::TauWeightedTerminal);
    }

    #[test]
    fn validate_catches_bad_weights() {
        let mut lq = LqModelSpec::new("bad", 1, 1, 1.0).unwrap();
        lq.control_weight = Arc::new(|_, _| DMatrix::from_element(1, 1, -1.0));
        assert!(matches!(lq.validate(4), Err(Error::Singular { .. })));
        let mut lq = LqModelSpec::new("bad", 2, 1, 1.0).unwrap();
        lq.terminal_weight = Arc::new(|_| DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert!(lq.validate(4).is_err());
    }

    fn probe_box() -> ProbeBox {
        ProbeBox { t: (0.0, 1.0), x: (-3.0, 3.0), q: (-2.0, 2.0) }
    }

    #[test]
    fn lipschitz_linear_and_constant() {
        let lin = scalar_model().with_drift_state(|_, x, _| 2.0 * x).with_diffusion(|_, _, _| 1.0);
        let r = lipschitz_probe(&lin, 500, probe_box(), 1).unwrap();
        assert!((r.drift - 2.0).abs() < 1e-9, "{}", r.drift);
        assert_eq!(r.diffusion, 0.0);
        let constant = ModelSpec::new("c", 1.0, 1).unwrap().with_drift_state(|_, _, _| 4.0);
        let r = lipschitz_probe(&constant, 200, probe_box(), 2).unwrap();
        assert_eq!(r.drift, 0.0);
    }

    #[test]
    fn lipschitz_sine_and_warnings() {
        let sine = ModelSpec::new("s", 1.0, 1)
            .unwrap()
            .with_drift_state(|_, x, _| x.sin())
            .with_psi_closed_form(|_, _, q, out| out[0] = -q / 2.0)
            .with_lipschitz(Some(0.5), Some(0.1));
        let r = lipschitz_probe(&sine, 2000, probe_box(), 3).unwrap();
        assert!(r.drift <= 1.0 + 1e-6);
        assert!((r.psi - 0.5).abs() < 0.5);
        assert_eq!(r.warnings.len(), 2, "{:?}", r.warnings);
        let bad = ProbeBox { t: (0.0, f64::INFINITY), ..probe_box() };
        assert!(lipschitz_probe(&sine, 10, bad, 0).is_err());
    }
}
