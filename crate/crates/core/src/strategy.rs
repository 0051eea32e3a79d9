//! Closed-loop feedback strategies `u(t, x)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub trait Feedback: Sync {
    fn control_dim(&self) -> usize;
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// Locates `t` on a uniform grid: `(k, w)` with `t = (1 - w) t_k + w t_{k+1}`.
/// Times within 1e-9 steps of a node snap to it.
fn locate(grid: &[f64], t: f64) -> (usize, f64) {
    let last = grid.len() - 1;
    let h = (grid[last] - grid[0]) / last as f64;
    let s = (t - grid[0]) / h;
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        let k = (r.max(0.0) as usize).min(last);
        return if k == last { (last - 1, 1.0) } else { (k, 0.0) };
    }
    if s <= 0.0 {
        return (0, 0.0);
    }
    let k = (s.floor() as usize).min(last - 1);
    (k, (s - k as f64).clamp(0.0, 1.0))
}

/// `u(t, x) = K(t) x + k(t)`, linear in `t` between grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStrategy {
    grid: Vec<f64>,
    dim: usize,
    control_dim: usize,
    /// Row-major `l x d` gain per node.
    gains: Vec<f64>,
    offsets: Vec<f64>,
    lipschitz: f64,
}

impl AffineStrategy {
    pub fn new(grid: Vec<f64>, gains: &[DMatrix<f64>], offsets: &[DVector<f64>]) -> Self {
        let (control_dim, dim) = gains[0].shape();
        let mut flat_gains = Vec::with_capacity(gains.len() * control_dim * dim);
        for g in gains {
            for r in 0..control_dim {
                for c in 0..dim {
                    flat_gains.push(g[(r, c)]);
                }
            }
        }
        let flat_offsets = offsets.iter().flat_map(|o| o.iter().copied()).collect();
        let lipschitz = gains.iter().map(spectral_norm).fold(0.0, f64::max);
        Self { grid, dim, control_dim, gains: flat_gains, offsets: flat_offsets, lipschitz }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gain(&self, k: usize) -> DMatrix<f64> {
        let n = self.control_dim * self.dim;
        DMatrix::from_row_slice(self.control_dim, self.dim, &self.gains[k * n..(k + 1) * n])
    }

    pub fn offset(&self, k: usize) -> DVector<f64> {
        let l = self.control_dim;
        DVector::from_column_slice(&self.offsets[k * l..(k + 1) * l])
    }

    /// Replaces the offsets by `theta * self + (1 - theta) * previous`.
    pub fn damp_offsets(&mut self, previous: &AffineStrategy, theta: f64) {
        for (o, p) in self.offsets.iter_mut().zip(&previous.offsets) {
            *o = theta * *o + (1.0 - theta) * p;
        }
    }

    /// Lipschitz constant in `x`: the largest spectral norm of the gains.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        for r in 0..self.control_dim {
            for c in 0..self.dim {
                header.push(format!("gain_{}_{}", r + 1, c + 1));
            }
        }
        header.extend((1..=self.control_dim).map(|r| format!("offset_{r}")));
        writeln!(out, "{}", header.join(","))?;
        let n = self.control_dim * self.dim;
        let l = self.control_dim;
        for (k, t) in self.grid.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.gains[k * n..(k + 1) * n].iter().map(|v| v.to_string()));
            row.extend(self.offsets[k * l..(k + 1) * l].iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.clone().singular_values().max()
}

impl Feedback for AffineStrategy {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (k, w) = locate(&self.grid, t);
        let (d, l) = (self.dim, self.control_dim);
        let n = l * d;
        let g0 = &self.gains[k * n..(k + 1) * n];
        let o0 = &self.offsets[k * l..(k + 1) * l];
        if w == 0.0 {
            for r in 0..l {
                out[r] = o0[r] + (0..d).map(|c| g0[r * d + c] * x[c]).sum::<f64>();
            }
            return;
        }
        let g1 = &self.gains[(k + 1) * n..(k + 2) * n];
        let o1 = &self.offsets[(k + 1) * l..(k + 2) * l];
        for r in 0..l {
            let mut acc = (1.0 - w) * o0[r] + w * o1[r];
            for c in 0..d {
                acc += ((1.0 - w) * g0[r * d + c] + w * g1[r * d + c]) * x[c];
            }
            out[r] = acc;
        }
    }
}

/// Controls tabulated on a `(t, x)` grid, bilinear in between and clamped to
/// the boundary values outside `[x_lo, x_hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStrategy {
    t_grid: Vec<f64>,
    x_lo: f64,
    dx: f64,
    nx: usize,
    control_dim: usize,
    /// `[k][i][r]`
    controls: Vec<f64>,
    lipschitz: f64,
}

impl GridStrategy {
    pub fn new(t_grid: Vec<f64>, x_lo: f64, dx: f64, nx: usize, control_dim: usize, controls: Vec<f64>) -> Self {
        debug_assert_eq!(controls.len(), t_grid.len() * nx * control_dim);
        let mut lipschitz = 0.0f64;
        for k in 0..t_grid.len() {
            for i in 0..nx - 1 {
                let a = &controls[(k * nx + i) * control_dim..(k * nx + i + 1) * control_dim];
                let b = &controls[(k * nx + i + 1) * control_dim..(k * nx + i + 2) * control_dim];
                let diff = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                lipschitz = lipschitz.max(diff / dx);
            }
        }
        Self { t_grid, x_lo, dx, nx, control_dim, controls, lipschitz }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_lo, self.x_lo + self.dx * (self.nx - 1) as f64)
    }

    pub fn node_control(&self, k: usize, i: usize) -> &[f64] {
        let l = self.control_dim;
        &self.controls[(k * self.nx + i) * l..(k * self.nx + i + 1) * l]
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend((1..=self.control_dim).map(|r| format!("u_{r}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.t_grid.iter().enumerate() {
            for i in 0..self.nx {
                let x = self.x_lo + self.dx * i as f64;
                let mut row = vec![t.to_string(), x.to_string()];
                row.extend(self.node_control(k, i).iter().map(|v| v.to_string()));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

impl Feedback for GridStrategy {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (k, w) = locate(&self.t_grid, t);
        let s = ((x[0] - self.x_lo) / self.dx).clamp(0.0, (self.nx - 1) as f64);
        let i = (s.floor() as usize).min(self.nx - 2);
        let v = s - i as f64;
        for (r, o) in out.iter_mut().enumerate().take(self.control_dim) {
            let at = |kk: usize, ii: usize| self.controls[(kk * self.nx + ii) * self.control_dim + r];
            let row0 = (1.0 - v) * at(k, i) + v * at(k, i + 1);
            *o = if w == 0.0 {
                row0
            } else {
                let row1 = (1.0 - v) * at(k + 1, i) + v * at(k + 1, i + 1);
                (1.0 - w) * row0 + w * row1
            };
        }
    }
}

/// Strategies produced by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackStrategy {
    Affine(AffineStrategy),
    Grid(GridStrategy),
}

impl FeedbackStrategy {
    pub fn lipschitz(&self) -> f64 {
        match self {
            FeedbackStrategy::Affine(s) => s.lipschitz(),
            FeedbackStrategy::Grid(s) => s.lipschitz(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FeedbackStrategy::Affine(_) => "affine",
            FeedbackStrategy::Grid(_) => "grid",
        }
    }

    /// Sup-norm difference of the tabulated data; infinite when the two
    /// strategies are not comparable.
    pub fn sup_difference(&self, other: &FeedbackStrategy) -> f64 {
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        match (self, other) {
            (FeedbackStrategy::Affine(a), FeedbackStrategy::Affine(b)) if a.gains.len() == b.gains.len() => {
                sup(&a.gains, &b.gains).max(sup(&a.offsets, &b.offsets))
            }
            (FeedbackStrategy::Grid(a), FeedbackStrategy::Grid(b)) if a.controls.len() == b.controls.len() => {
                sup(&a.controls, &b.controls)
            }
            _ => f64::INFINITY,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            FeedbackStrategy::Affine(s) => s.write_csv(out),
            FeedbackStrategy::Grid(s) => s.write_csv(out),
        }
    }
}

impl Feedback for FeedbackStrategy {
    fn control_dim(&self) -> usize {
        match self {
            FeedbackStrategy::Affine(s) => s.control_dim(),
            FeedbackStrategy::Grid(s) => s.control_dim(),
        }
    }

    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            FeedbackStrategy::Affine(s) => s.control(t, x, out),
            FeedbackStrategy::Grid(s) => s.control(t, x, out),
        }
    }
}

/// Strategy given by a closure.
pub struct FnFeedback<F> {
    control_dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> FnFeedback<F> {
    pub fn new(control_dim: usize, f: F) -> Self {
        Self { control_dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> Feedback for FnFeedback<F> {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }
}

/// `u = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFeedback(pub usize);

impl Feedback for ZeroFeedback {
    fn control_dim(&self) -> usize {
        self.0
    }

    fn control(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Constant control `value` on `[start, until)` followed by `base`.
pub struct SpikeFeedback<'a, S: ?Sized> {
    pub base: &'a S,
    pub value: Vec<f64>,
    pub start: f64,
    pub until: f64,
}

impl<S: Feedback + ?Sized> Feedback for SpikeFeedback<'_, S> {
    fn control_dim(&self) -> usize {
        self.base.control_dim()
    }

    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if t >= self.start && t < self.until {
            out.copy_from_slice(&self.value);
        } else {
            self.base.control(t, x, out);
        }
    }
}
