//! Finite-difference solve of the time-inconsistent HJB family in one state
//! dimension, given a frozen distribution curve.
//!
//! Each row `Theta(tau_j; t, x)` solves, backward in `t` on `[tau_j, T]`,
//!
//! ```text
//! d_t Theta + A(t, x) d_x Theta + b(t, x, m)^2 / 2 d_xx Theta + F(tau_j; t, x) = 0,
//! Theta(tau_j; T, x) = g(tau_j, x, m(T)),
//! ```
//!
//! with `A`, `F` the drift and running cost evaluated at the control
//! `psi(t, x, d_x Theta(t; t, x))`. The rows only interact through the
//! diagonal gradient. Diffusion is implicit (one tridiagonal factorization
//! per step, shared by all rows); drift is explicit and upwinded.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DistributionCurve, MomentVector};
use crate::model::{eval_psi_into, ModelSpec};
use crate::simulate::FrozenCurve;
use crate::strategy::GridStrategy;

/// Uniform spatial grid with `intervals + 1` nodes on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XDomain {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
}

impl XDomain {
    pub fn new(lo: f64, hi: f64, intervals: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || intervals < 2 {
            return Err(Error::InvalidParameter(format!("bad spatial domain [{lo}, {hi}] with {intervals} intervals")));
        }
        Ok(Self { lo, hi, intervals })
    }

    /// `center -+ 8 * spread`.
    pub fn around(center: f64, spread: f64, intervals: usize) -> Result<Self> {
        let w = 8.0 * spread.max(1e-6);
        Self::new(center - w, center + w, intervals)
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + self.dx() * i as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.x(i)).collect()
    }

    /// Whether `x` lies in the middle half `[lo + w/4, hi - w/4]`.
    pub fn in_inner_half(&self, x: f64) -> bool {
        let q = 0.25 * (self.hi - self.lo);
        x >= self.lo + q - 1e-12 && x <= self.hi - q + 1e-12
    }
}

/// Which off-diagonal rows are kept after the solve. The diagonal
/// `Theta(t; t, .)` and its gradient are always kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    #[default]
    Diagonal,
    /// Rows `j` and times `k` that are multiples of the stride.
    Thinned { stride: usize },
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HjbOptions {
    pub storage: Storage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    t_grid: Vec<f64>,
    domain: XDomain,
    /// `Theta(t_k; t_k, x_i)`, `[k][i]`
    diag_value: Vec<f64>,
    /// `d_x Theta(t_k; t_k, x_i)`
    diag_grad: Vec<f64>,
    snapshots: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ValueSurface {
    /// Surface from tabulated diagonal values; gradients by finite differences.
    pub fn from_diagonal(t_grid: Vec<f64>, domain: XDomain, diag_value: Vec<f64>) -> Result<Self> {
        let n = domain.nodes();
        if diag_value.len() != t_grid.len() * n {
            return Err(Error::DimensionMismatch { expected: t_grid.len() * n, found: diag_value.len() });
        }
        let mut diag_grad = vec![0.0; diag_value.len()];
        for k in 0..t_grid.len() {
            gradient(&diag_value[k * n..(k + 1) * n], domain.dx(), &mut diag_grad[k * n..(k + 1) * n]);
        }
        Ok(Self { t_grid, domain, diag_value, diag_grad, snapshots: BTreeMap::new() })
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn domain(&self) -> XDomain {
        self.domain
    }

    pub fn diag_values(&self, k: usize) -> &[f64] {
        let n = self.domain.nodes();
        &self.diag_value[k * n..(k + 1) * n]
    }

    pub fn diag_grad(&self, k: usize) -> &[f64] {
        let n = self.domain.nodes();
        &self.diag_grad[k * n..(k + 1) * n]
    }

    /// `Theta(tau_j; t_k, .)` if it was stored.
    pub fn theta(&self, j: usize, k: usize) -> Option<&[f64]> {
        if j == k {
            return Some(self.diag_values(k));
        }
        self.snapshots.get(&(j, k)).map(|v| v.as_slice())
    }

    /// Linear interpolation of `Theta(t_k; t_k, .)` at `x`, clamped to the domain.
    pub fn diag_value_at(&self, k: usize, x: f64) -> f64 {
        interpolate(self.diag_values(k), &self.domain, x)
    }

    /// Rows `(tau, t, x, Theta)` for every stored slice, diagonal included.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tau,t,x,theta")?;
        let mut keys: Vec<(usize, usize)> = self.snapshots.keys().copied().collect();
        keys.extend((0..self.t_grid.len()).map(|k| (k, k)));
        keys.sort_unstable();
        keys.dedup();
        for (j, k) in keys {
            let values = self.theta(j, k).expect("stored key");
            for (i, v) in values.iter().enumerate() {
                writeln!(out, "{},{},{},{}", self.t_grid[j], self.t_grid[k], self.domain.x(i), v)?;
            }
        }
        Ok(())
    }

    /// Rows `(t, x, Theta(t; t, x), d_x Theta(t; t, x))`.
    pub fn write_diag_grad_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,x,theta,grad")?;
        for (k, t) in self.t_grid.iter().enumerate() {
            for (i, (v, g)) in self.diag_values(k).iter().zip(self.diag_grad(k)).enumerate() {
                writeln!(out, "{},{},{},{}", t, self.domain.x(i), v, g)?;
            }
        }
        Ok(())
    }
}

fn interpolate(values: &[f64], domain: &XDomain, x: f64) -> f64 {
    let s = ((x - domain.lo) / domain.dx()).clamp(0.0, domain.intervals as f64);
    let i = (s.floor() as usize).min(domain.intervals - 1);
    let w = s - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

/// Central differences inside, one-sided at the ends.
fn gradient(theta: &[f64], dx: f64, out: &mut [f64]) {
    let n = theta.len();
    out[0] = (theta[1] - theta[0]) / dx;
    out[n - 1] = (theta[n - 1] - theta[n - 2]) / dx;
    for i in 1..n - 1 {
        out[i] = (theta[i + 1] - theta[i - 1]) / (2.0 * dx);
    }
}

/// Thomas factorization of `I - h/2 b^2 D_xx` with identity boundary rows.
struct Tridiagonal {
    lambda: Vec<f64>,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiagonal {
    fn new(lambda: Vec<f64>) -> Self {
        let n = lambda.len();
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![1.0; n];
        // row 0 is the identity: c'_0 = 0
        for i in 1..n - 1 {
            let (a, b, c) = (-lambda[i], 1.0 + 2.0 * lambda[i], -lambda[i]);
            denom[i] = b - a * c_prime[i - 1];
            c_prime[i] = c / denom[i];
        }
        Self { lambda, c_prime, denom }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        // forward sweep; rows 0 and n-1 are identity rows
        for i in 1..n - 1 {
            rhs[i] = (rhs[i] + self.lambda[i] * rhs[i - 1]) / self.denom[i];
        }
        for i in (1..n - 1).rev() {
            rhs[i] -= self.c_prime[i] * rhs[i + 1];
        }
    }
}

/// Explicit upwind drift and running cost, then the implicit diffusion solve.
fn advance(theta: &[f64], drift: &[f64], cost: &[f64], h: f64, dx: f64, tri: &Tridiagonal) -> Vec<f64> {
    let n = theta.len();
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let a = drift[i];
        let slope = if a > 0.0 {
            if i + 1 < n {
                theta[i + 1] - theta[i]
            } else {
                theta[i] - theta[i - 1]
            }
        } else if i > 0 {
            theta[i] - theta[i - 1]
        } else {
            theta[1] - theta[0]
        };
        rhs[i] = theta[i] + h * (a * slope / dx + cost[i]);
    }
    tri.solve(&mut rhs);
    rhs
}

struct Frame<'a> {
    t: f64,
    m: &'a MomentVector,
    controls: Vec<f64>,
    drift: Vec<f64>,
}

fn frame<'a>(model: &ModelSpec, domain: &XDomain, t: f64, m: &'a MomentVector, grad: &[f64]) -> Result<Frame<'a>> {
    let l = model.control_dim;
    let n = domain.nodes();
    let mut controls = vec![0.0; n * l];
    controls
        .par_chunks_mut(l)
        .enumerate()
        .try_for_each(|(i, out)| eval_psi_into(model, t, domain.x(i), grad[i], out))?;
    let drift = (0..n).map(|i| model.drift(t, domain.x(i), m, &controls[i * l..(i + 1) * l])).collect();
    Ok(Frame { t, m, controls, drift })
}

fn costs(model: &ModelSpec, domain: &XDomain, tau: f64, f: &Frame<'_>) -> Vec<f64> {
    let l = model.control_dim;
    (0..domain.nodes())
        .map(|i| model.running_cost(tau, f.t, domain.x(i), f.m, &f.controls[i * l..(i + 1) * l]))
        .collect()
}

fn check_drift(f: &Frame<'_>, h: f64, dx: f64) -> Result<()> {
    let max_a = f.drift.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if !max_a.is_finite() {
        return Err(Error::NonFinite(format!("drift at t = {}", f.t)));
    }
    if h * max_a > dx * (1.0 + 1e-12) {
        return Err(Error::Monotonicity { required: dx / max_a, actual: h });
    }
    Ok(())
}

fn keep(storage: Storage, j: usize, k: usize) -> bool {
    match storage {
        Storage::Diagonal => false,
        Storage::Full => true,
        Storage::Thinned { stride } => {
            let s = stride.max(1);
            j.is_multiple_of(s) && k.is_multiple_of(s)
        }
    }
}

/// [`solve_hjb_family_with`] reading the measure off `mu`.
pub fn solve_hjb_family(model: &ModelSpec, mu: &DistributionCurve, domain: XDomain) -> Result<ValueSurface> {
    solve_hjb_family_with(model, &FrozenCurve::new(model, mu)?, domain, HjbOptions::default())
}

/// Backward march of all rows at once. Per step `t_{k+1} -> t_k`:
///
/// 1. controls from the diagonal gradient at `t_{k+1}`; row `k` alone is
///    advanced with them, which predicts the diagonal gradient at `t_k`;
/// 2. every row is advanced with the controls `psi(t_k, x, predicted gradient)`
///    and the coefficients at `t_k`.
///
/// The explicit drift needs `h * max |A| <= dx`; the diffusion must not vanish.
pub fn solve_hjb_family_with(
    model: &ModelSpec,
    frozen: &FrozenCurve,
    domain: XDomain,
    options: HjbOptions,
) -> Result<ValueSurface> {
    let grid = frozen.grid().to_vec();
    let steps = grid.len() - 1;
    if (grid[steps] - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(Error::GridMismatch(format!("curve ends at {}, horizon is {}", grid[steps], model.horizon)));
    }
    let h = frozen.step();
    let dx = domain.dx();
    let n = domain.nodes();
    let xs = domain.points();
    let moments = frozen.moments();

    let end = &moments[steps];
    let mut rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|&tau| xs.iter().map(|&x| (model.terminal)(tau, x, end)).collect())
        .collect();
    let mut diag_value = vec![0.0; (steps + 1) * n];
    let mut diag_grad = vec![0.0; (steps + 1) * n];
    let mut snapshots = BTreeMap::new();
    diag_value[steps * n..].copy_from_slice(&rows[steps]);
    gradient(&rows[steps], dx, &mut diag_grad[steps * n..]);
    for (j, row) in rows.iter().enumerate() {
        if j != steps && keep(options.storage, j, steps) {
            snapshots.insert((j, steps), row.clone());
        }
    }

    for k in (0..steps).rev() {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let lambda: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let b = (model.diffusion)(t0, x, &moments[k]);
                if !(b * b > 1e-14) {
                    return Err(Error::DegenerateDiffusion { t: t0, x });
                }
                Ok(if i == 0 || i == n - 1 { 0.0 } else { 0.5 * h * b * b / (dx * dx) })
            })
            .collect::<Result<_>>()?;
        let tri = Tridiagonal::new(lambda);

        let lagged = frame(model, &domain, t1, &moments[k + 1], &diag_grad[(k + 1) * n..(k + 2) * n])?;
        check_drift(&lagged, h, dx)?;
        let predicted = advance(&rows[k], &lagged.drift, &costs(model, &domain, grid[k], &lagged), h, dx, &tri);
        let mut grad_pred = vec![0.0; n];
        gradient(&predicted, dx, &mut grad_pred);

        let current = frame(model, &domain, t0, &moments[k], &grad_pred)?;
        check_drift(&current, h, dx)?;
        rows.truncate(k + 1);
        rows.par_iter_mut().enumerate().for_each(|(j, row)| {
            let cost = costs(model, &domain, grid[j], &current);
            *row = advance(row, &current.drift, &cost, h, dx, &tri);
        });
        for (j, row) in rows.iter().enumerate() {
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("Theta(tau = {}; t = {}, x = {})", grid[j], t0, xs[i])));
            }
            if j != k && keep(options.storage, j, k) {
                snapshots.insert((j, k), row.clone());
            }
        }
        diag_value[k * n..(k + 1) * n].copy_from_slice(&rows[k]);
        gradient(&rows[k], dx, &mut diag_grad[k * n..(k + 1) * n]);
    }
    Ok(ValueSurface { t_grid: grid, domain, diag_value, diag_grad, snapshots })
}

/// `u(t_k, x_i) = psi(t_k, x_i, d_x Theta(t_k; t_k, x_i))`, bilinear in between.
pub fn extract_strategy_grid(surface: &ValueSurface, model: &ModelSpec) -> Result<GridStrategy> {
    let l = model.control_dim;
    let n = surface.domain.nodes();
    let mut controls = vec![0.0; surface.t_grid.len() * n * l];
    controls.par_chunks_mut(n * l).enumerate().try_for_each(|(k, slab)| {
        let grad = surface.diag_grad(k);
        slab.chunks_mut(l)
            .enumerate()
            .try_for_each(|(i, out)| eval_psi_into(model, surface.t_grid[k], surface.domain.x(i), grad[i], out))
    })?;
    Ok(GridStrategy::new(surface.t_grid.clone(), surface.domain.lo, surface.domain.dx(), n, l, controls))
}

/// Observed analogues of the regularity constants of the diagonal value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityReport {
    /// `sup_t |d_x Theta(t; t, 0)|`, with `x = 0` clamped into the domain.
    pub grad_at_origin: f64,
    /// `sup |d_xx Theta(t; t, .)|` over interior nodes.
    pub second_derivative: f64,
    /// Largest difference quotient of the diagonal gradient.
    pub gradient_lipschitz: f64,
}

pub fn regularity_report(surface: &ValueSurface) -> RegularityReport {
    let d = surface.domain;
    let dx = d.dx();
    let mut report = RegularityReport { grad_at_origin: 0.0, second_derivative: 0.0, gradient_lipschitz: 0.0 };
    for k in 0..surface.t_grid.len() {
        let v = surface.diag_values(k);
        let g = surface.diag_grad(k);
        report.grad_at_origin = report.grad_at_origin.max(interpolate(g, &d, 0.0).abs());
        for i in 1..v.len() - 1 {
            let second = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx);
            report.second_derivative = report.second_derivative.max(second.abs());
        }
        for w in g.windows(2) {
            report.gradient_lipschitz = report.gradient_lipschitz.max((w[1] - w[0]).abs() / dx);
        }
    }
    report
}
