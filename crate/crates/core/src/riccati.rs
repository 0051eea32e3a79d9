//! Two-parameter Riccati family for the semi-linear model and its affine
//! equilibrium feedback.
//!
//! For each evaluation time `tau` the value of the frozen-curve problem under
//! the equilibrium feedback is `<P(tau; t) x, x> + 2 <p(tau; t), x> + eta(tau; t)`.
//! With `D = P(t; t)`, `d = p(t; t)`, `M = B R(t;t)^-1 B'` and
//! `S = B R(t;t)^-1 R(tau; t) R(t;t)^-1 B'`:
//!
//! ```text
//! -dP/dt   = P A + A'P + Q(tau; t) - (P M D + D M P) + D S D,        P(tau; T) = G(tau)
//! -dp/dt   = A'p - D M p + P (a - M d) + D S d,                      p(tau; T) = 0
//! -deta/dt = <P b, b> + 2 <p, a - M d> + <S d, d> + F(tau; t),        eta(tau; T) = H(tau)
//! ```
//!
//! The rows are coupled only through the diagonal `(D, d)`, which is supplied by
//! the row with `tau = t` and handled by a Heun predictor-corrector.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DistributionCurve, MomentVector};
use crate::model::LqModelSpec;
use crate::simulate::FrozenCurve;
use crate::strategy::AffineStrategy;

/// Right-hand side used for `p` and `eta`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetForm {
    /// Obtained by matching the linear and constant terms of the quadratic
    /// value ansatz under the equilibrium feedback.
    #[default]
    Derived,
    /// `-dp/dt = P (a - M d) + D S D` and `-deta/dt = <P b, b> + <S p, p> + F`.
    /// Scalar models only.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiccatiOptions {
    pub offset_form: OffsetForm,
}

/// Triangular storage of `P(tau_j; t_k)`, `p(tau_j; t_k)`, `eta(tau_j; t_k)`
/// for `j <= k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiFamily {
    grid: Vec<f64>,
    dim: usize,
    quad: Vec<f64>,
    linear: Vec<f64>,
    constant: Vec<f64>,
    options: RiccatiOptions,
}

fn tri_len(nodes: usize) -> usize {
    nodes * (nodes + 1) / 2
}

impl RiccatiFamily {
    fn index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j <= k && k < self.grid.len());
        let n = self.grid.len();
        j * n - j * (j.saturating_sub(1)) / 2 + (k - j)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn options(&self) -> RiccatiOptions {
        self.options
    }

    /// `P(tau_j; t_k)`; requires `j <= k`.
    pub fn p_matrix(&self, j: usize, k: usize) -> DMatrix<f64> {
        let d = self.dim;
        let i = self.index(j, k) * d * d;
        DMatrix::from_row_slice(d, d, &self.quad[i..i + d * d])
    }

    /// `p(tau_j; t_k)`; requires `j <= k`.
    pub fn p_vector(&self, j: usize, k: usize) -> DVector<f64> {
        let d = self.dim;
        let i = self.index(j, k) * d;
        DVector::from_column_slice(&self.linear[i..i + d])
    }

    /// `eta(tau_j; t_k)`; requires `j <= k`.
    pub fn eta(&self, j: usize, k: usize) -> f64 {
        self.constant[self.index(j, k)]
    }

    /// Raw triangular `P` storage, row-major `d x d` blocks.
    pub fn p_array(&self) -> &[f64] {
        &self.quad
    }

    pub fn diagonal_p(&self, k: usize) -> DMatrix<f64> {
        self.p_matrix(k, k)
    }

    pub fn diagonal_offset(&self, k: usize) -> DVector<f64> {
        self.p_vector(k, k)
    }

    pub fn diagonal_eta(&self, k: usize) -> f64 {
        self.eta(k, k)
    }

    /// Diagonal export: `t`, `P(t;t)` row-major, `p(t;t)`, `eta(t;t)`.
    pub fn write_diagonal_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim;
        let mut header = vec!["t".to_string()];
        for r in 1..=d {
            for c in 1..=d {
                header.push(format!("P_{r}{c}"));
            }
        }
        header.extend((1..=d).map(|i| format!("p_{i}")));
        header.push("eta".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.grid.iter().enumerate() {
            let i = self.index(k, k);
            let mut row = vec![t.to_string()];
            row.extend(self.quad[i * d * d..(i + 1) * d * d].iter().map(|v| v.to_string()));
            row.extend(self.linear[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
            row.push(self.constant[i].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Row {
    quad: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl Row {
    fn axpy(&self, h: f64, other: &Row) -> Row {
        Row {
            quad: &self.quad + &other.quad * h,
            linear: &self.linear + &other.linear * h,
            constant: self.constant + h * other.constant,
        }
    }

    fn finite(&self) -> bool {
        self.quad.iter().chain(self.linear.iter()).all(|v| v.is_finite()) && self.constant.is_finite()
    }
}

struct Node {
    t: f64,
    a: DMatrix<f64>,
    /// `B R(t;t)^-1 B'`
    m: DMatrix<f64>,
    /// `B R(t;t)^-1`
    br: DMatrix<f64>,
    drift: DVector<f64>,
    noise: DVector<f64>,
    moments: MomentVector,
}

fn control_inverse(lq: &LqModelSpec, t: f64, node: usize) -> Result<DMatrix<f64>> {
    (lq.control_weight)(t, t)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular { node, what: "R(t;t) is not positive definite".into() })
}

fn node_data(lq: &LqModelSpec, t: f64, m: &MomentVector, k: usize) -> Result<Node> {
    let rinv = control_inverse(lq, t, k)?;
    let b = (lq.control_matrix)(t);
    let br = &b * &rinv;
    Ok(Node {
        t,
        a: (lq.state_matrix)(t),
        m: &br * b.transpose(),
        br,
        drift: (lq.drift_offset)(t, m),
        noise: (lq.noise)(t, m),
        moments: m.clone(),
    })
}

fn bracket(lq: &LqModelSpec, node: &Node, tau: f64, diag: &Row, y: &Row, form: OffsetForm) -> Row {
    let q = (lq.state_weight)(tau, node.t);
    let r = (lq.control_weight)(tau, node.t);
    let s = &node.br * r * node.br.transpose();
    let dm = &diag.quad;
    let dv = &diag.linear;
    let pmd = &y.quad * &node.m * dm;
    let quad = &y.quad * &node.a + node.a.tr_mul(&y.quad) + q - (&pmd + pmd.transpose()) + dm * &s * dm;
    let effective = &node.drift - &node.m * dv;
    let f = (lq.running_offset)(tau, node.t, &node.moments);
    let noise_term = node.noise.dot(&(&y.quad * &node.noise));
    let (linear, constant) = match form {
        OffsetForm::Derived => (
            node.a.tr_mul(&y.linear) - dm * (&node.m * &y.linear) + &y.quad * &effective + dm * (&s * dv),
            noise_term + 2.0 * y.linear.dot(&effective) + dv.dot(&(&s * dv)) + f,
        ),
        OffsetForm::AsPrinted => (
            &y.quad * &effective + DVector::from_element(1, (dm * &s * dm)[(0, 0)]),
            noise_term + y.linear.dot(&(&s * &y.linear)) + f,
        ),
    };
    Row { quad, linear, constant }
}

/// [`solve_riccati_family_with`] with default options, reading `a`, `b`, `F`,
/// `H` off the frozen curve `mu`.
pub fn solve_riccati_family(lq: &LqModelSpec, mu: &DistributionCurve) -> Result<RiccatiFamily> {
    solve_riccati_family_with(lq, &FrozenCurve::new(lq, mu)?, RiccatiOptions::default())
}

/// Integrates all rows backward from `T` on the grid of `frozen`.
///
/// At each step every row takes an Euler predictor with the diagonal at
/// `t_{k+1}`; the predicted row `k` supplies the diagonal at `t_k` for the
/// trapezoidal corrector.
pub fn solve_riccati_family_with(
    lq: &LqModelSpec,
    frozen: &FrozenCurve,
    options: RiccatiOptions,
) -> Result<RiccatiFamily> {
    let d = lq.dim;
    if options.offset_form == OffsetForm::AsPrinted && (d != 1 || lq.control_dim != 1) {
        return Err(Error::InvalidParameter("the as-printed offset form is defined for scalar models only".into()));
    }
    let grid = frozen.grid().to_vec();
    let steps = grid.len() - 1;
    if (grid[steps] - lq.horizon).abs() > 1e-12 * lq.horizon.max(1.0) {
        return Err(Error::GridMismatch(format!("curve ends at {}, horizon is {}", grid[steps], lq.horizon)));
    }
    let h = frozen.step();
    let nodes = grid
        .par_iter()
        .enumerate()
        .map(|(k, &t)| node_data(lq, t, &frozen.moments()[k], k))
        .collect::<Result<Vec<_>>>()?;

    let nodes_n = steps + 1;
    let mut fam = RiccatiFamily {
        grid: grid.clone(),
        dim: d,
        quad: vec![0.0; tri_len(nodes_n) * d * d],
        linear: vec![0.0; tri_len(nodes_n) * d],
        constant: vec![0.0; tri_len(nodes_n)],
        options,
    };
    let store = |fam: &mut RiccatiFamily, j: usize, k: usize, row: &Row| {
        let i = fam.index(j, k);
        for r in 0..d {
            for c in 0..d {
                fam.quad[i * d * d + r * d + c] = row.quad[(r, c)];
            }
        }
        fam.linear[i * d..(i + 1) * d].copy_from_slice(row.linear.as_slice());
        fam.constant[i] = row.constant;
    };
    let load = |fam: &RiccatiFamily, j: usize, k: usize| Row {
        quad: fam.p_matrix(j, k),
        linear: fam.p_vector(j, k),
        constant: fam.eta(j, k),
    };

    let end = &frozen.moments()[steps];
    for (j, &tau) in grid.iter().enumerate() {
        let row = Row {
            quad: (lq.terminal_weight)(tau),
            linear: DVector::zeros(d),
            constant: (lq.terminal_offset)(tau, end),
        };
        store(&mut fam, j, steps, &row);
    }

    let form = options.offset_form;
    for k in (0..steps).rev() {
        let diag_next = load(&fam, k + 1, k + 1);
        let previous: Vec<Row> = (0..=k).map(|j| load(&fam, j, k + 1)).collect();
        let predicted: Vec<(Row, Row)> = previous
            .par_iter()
            .enumerate()
            .map(|(j, y)| {
                let slope = bracket(lq, &nodes[k + 1], grid[j], &diag_next, y, form);
                (y.axpy(h, &slope), slope)
            })
            .collect();
        let diag_pred = predicted[k].0.clone();
        let corrected: Vec<Row> = predicted
            .par_iter()
            .zip(previous.par_iter())
            .enumerate()
            .map(|(j, ((guess, slope), y))| {
                let slope_k = bracket(lq, &nodes[k], grid[j], &diag_pred, guess, form);
                let mut row = y.axpy(0.5 * h, slope).axpy(0.5 * h, &slope_k);
                row.quad = (&row.quad + row.quad.transpose()) * 0.5;
                row
            })
            .collect();
        for (j, row) in corrected.iter().enumerate() {
            if !row.finite() {
                return Err(Error::Breakdown { node: k, what: format!("non-finite Riccati row tau = {}", grid[j]) });
            }
            store(&mut fam, j, k, row);
        }
    }
    Ok(fam)
}

/// The affine feedback `u(t, x) = -R(t;t)^-1 B'(t) [P(t;t) x + p(t;t)]` at
/// every node.
pub fn extract_strategy_lq(fam: &RiccatiFamily, lq: &LqModelSpec) -> Result<AffineStrategy> {
    let mut gains = Vec::with_capacity(fam.grid.len());
    let mut offsets = Vec::with_capacity(fam.grid.len());
    for (k, &t) in fam.grid.iter().enumerate() {
        let rinv = control_inverse(lq, t, k)?;
        let rb = -(rinv * (lq.control_matrix)(t).transpose());
        gains.push(&rb * fam.diagonal_p(k));
        offsets.push(&rb * fam.diagonal_offset(k));
    }
    Ok(AffineStrategy::new(fam.grid.clone(), &gains, &offsets))
}

fn bracket_node(grid: &[f64], s: f64) -> (usize, usize, f64) {
    let k = grid.len() - 1;
    let step = (grid[k] - grid[0]) / k as f64;
    let pos = ((s - grid[0]) / step).clamp(0.0, k as f64);
    let lo = (pos.floor() as usize).min(k);
    let w = pos - lo as f64;
    if w < 1e-9 || lo == k {
        (lo, lo, 0.0)
    } else if w > 1.0 - 1e-9 {
        (lo + 1, lo + 1, 0.0)
    } else {
        (lo, lo + 1, w)
    }
}

/// `<P(tau; t) x, x> + 2 <p(tau; t), x> + eta(tau; t)`, interpolated linearly
/// in both times off the grid.
pub fn value_lq(fam: &RiccatiFamily, tau: f64, t: f64, x: &[f64]) -> Result<f64> {
    if tau > t + 1e-12 {
        return Err(Error::InvalidParameter(format!("value needs tau <= t, got tau = {tau}, t = {t}")));
    }
    if x.len() != fam.dim {
        return Err(Error::DimensionMismatch { expected: fam.dim, found: x.len() });
    }
    let xv = DVector::from_column_slice(x);
    let at = |j: usize, k: usize| {
        let j = j.min(k);
        fam.p_matrix(j, k).dot(&(&xv * xv.transpose())) + 2.0 * fam.p_vector(j, k).dot(&xv) + fam.eta(j, k)
    };
    let (k0, k1, wk) = bracket_node(&fam.grid, t);
    let (j0, j1, wj) = bracket_node(&fam.grid, tau);
    let row = |k: usize| (1.0 - wj) * at(j0, k) + wj * at(j1, k);
    Ok((1.0 - wk) * row(k0) + wk * row(k1))
}

/// Solution of the classical one-parameter Riccati system for the time
/// consistent problem with weights `Q(t; t)`, `R(t; t)`, `G(T)`.
#[derive(Debug, Clone)]
pub struct ClassicalSolution {
    pub grid: Vec<f64>,
    pub quad: Vec<DMatrix<f64>>,
    pub linear: Vec<DVector<f64>>,
    pub constant: Vec<f64>,
}

impl ClassicalSolution {
    pub fn strategy(&self, lq: &LqModelSpec) -> Result<AffineStrategy> {
        let mut gains = Vec::with_capacity(self.grid.len());
        let mut offsets = Vec::with_capacity(self.grid.len());
        for (k, &t) in self.grid.iter().enumerate() {
            let rb = -(control_inverse(lq, t, k)? * (lq.control_matrix)(t).transpose());
            gains.push(&rb * &self.quad[k]);
            offsets.push(&rb * &self.linear[k]);
        }
        Ok(AffineStrategy::new(self.grid.clone(), &gains, &offsets))
    }
}

/// Classical RK4 backward solve with `substeps` stages per grid interval.
/// `a`, `b` and `F` are read at the nodes of `frozen` and interpolated
/// linearly inside each interval.
pub fn solve_classical_riccati(lq: &LqModelSpec, frozen: &FrozenCurve, substeps: usize) -> Result<ClassicalSolution> {
    let grid = frozen.grid().to_vec();
    let steps = grid.len() - 1;
    let d = lq.dim;
    let sub = substeps.max(1);
    let h = frozen.step() / sub as f64;
    let drift: Vec<DVector<f64>> = grid.iter().zip(frozen.moments()).map(|(&t, m)| (lq.drift_offset)(t, m)).collect();
    let noise: Vec<DVector<f64>> = grid.iter().zip(frozen.moments()).map(|(&t, m)| (lq.noise)(t, m)).collect();
    let offset: Vec<f64> = grid.iter().zip(frozen.moments()).map(|(&t, m)| (lq.running_offset)(t, t, m)).collect();

    let rhs = |k: usize, s: f64, y: &Row| -> Result<Row> {
        // s in [t_k, t_{k+1}]
        let w = ((s - grid[k]) / frozen.step()).clamp(0.0, 1.0);
        let a = &drift[k] * (1.0 - w) + &drift[k + 1] * w;
        let b = &noise[k] * (1.0 - w) + &noise[k + 1] * w;
        let f = offset[k] * (1.0 - w) + offset[k + 1] * w;
        let am = (lq.state_matrix)(s);
        let bm = (lq.control_matrix)(s);
        let rinv = control_inverse(lq, s, k)?;
        let m = &bm * rinv * bm.transpose();
        let q = (lq.state_weight)(s, s);
        let p = &y.quad;
        let quad = p * &am + am.tr_mul(p) + q - p * &m * p;
        let linear = (&am - &m * p).tr_mul(&y.linear) + p * &a;
        let constant = b.dot(&(p * &b)) + 2.0 * y.linear.dot(&a) - y.linear.dot(&(&m * &y.linear)) + f;
        Ok(Row { quad, linear, constant })
    };

    let mut y = Row {
        quad: (lq.terminal_weight)(lq.horizon),
        linear: DVector::zeros(d),
        constant: (lq.terminal_offset)(lq.horizon, &frozen.moments()[steps]),
    };
    let mut quad = vec![DMatrix::zeros(d, d); steps + 1];
    let mut linear = vec![DVector::zeros(d); steps + 1];
    let mut constant = vec![0.0; steps + 1];
    quad[steps] = y.quad.clone();
    linear[steps] = y.linear.clone();
    constant[steps] = y.constant;
    for k in (0..steps).rev() {
        for i in (0..sub).rev() {
            let s1 = grid[k] + (i + 1) as f64 * h;
            let k1 = rhs(k, s1, &y)?;
            let k2 = rhs(k, s1 - 0.5 * h, &y.axpy(0.5 * h, &k1))?;
            let k3 = rhs(k, s1 - 0.5 * h, &y.axpy(0.5 * h, &k2))?;
            let k4 = rhs(k, s1 - h, &y.axpy(h, &k3))?;
            y = y.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
            y.quad = (&y.quad + y.quad.transpose()) * 0.5;
        }
        if !y.finite() {
            return Err(Error::Breakdown { node: k, what: "non-finite classical Riccati solution".into() });
        }
        quad[k] = y.quad.clone();
        linear[k] = y.linear.clone();
        constant[k] = y.constant;
    }
    Ok(ClassicalSolution { grid, quad, linear, constant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{uniform_grid, EmpiricalMeasure};
    use crate::model::{build_lq_catalog, CatalogParams, LqCatalog};
    use std::sync::Arc;

    fn flat_curve(horizon: f64, steps: usize, points: Vec<f64>) -> DistributionCurve {
        DistributionCurve::constant(uniform_grid(horizon, steps), &EmpiricalMeasure::from_scalars(points).unwrap()).unwrap()
    }

    fn baseline(g: f64) -> LqModelSpec {
        let params = CatalogParams { terminal_weight: g, ..CatalogParams::default() };
        build_lq_catalog(LqCatalog::TimeConsistentBaseline, &params).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let g = 2.0;
        let lq = baseline(g);
        let fam = solve_riccati_family(&lq, &flat_curve(1.0, 2000, vec![0.0, 1.0])).unwrap();
        for (k, &t) in fam.grid().iter().enumerate() {
            let exact = g / (1.0 + g * (1.0 - t));
            assert!((fam.diagonal_p(k)[(0, 0)] - exact).abs() < 1e-5);
            // tau-independent coefficients: every row agrees with the diagonal
            assert!((fam.p_matrix(0, k)[(0, 0)] - exact).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_forcing_gives_zero_offset() {
        let fam = solve_riccati_family(&baseline(1.0), &flat_curve(1.0, 100, vec![-1.0, 3.0])).unwrap();
        assert!(fam.linear.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn terminal_rows() {
        let params = CatalogParams { offset: 0.3, coupling: 0.5, ..CatalogParams::default() };
        let mut lq = build_lq_catalog(LqCatalog::DissipativeMeanfield, &params).unwrap();
        lq.terminal_offset = Arc::new(|tau, m| tau + m.second_moment);
        let mu = flat_curve(1.0, 40, vec![1.0, 2.0]);
        let fam = solve_riccati_family(&lq, &mu).unwrap();
        for (j, &tau) in fam.grid().iter().enumerate() {
            assert!((fam.p_matrix(j, 40) - (lq.terminal_weight)(tau)).amax() < 1e-12);
            assert_eq!(fam.p_vector(j, 40)[0], 0.0);
            assert!((fam.eta(j, 40) - (tau + 2.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_part_ignores_forcing() {
        let params = CatalogParams { coupling: 0.5, ..CatalogParams::default() };
        let lq = build_lq_catalog(LqCatalog::DissipativeMeanfield, &params).unwrap();
        let mu = flat_curve(1.0, 50, vec![0.0, 2.0]);
        let base = solve_riccati_family(&lq, &mu).unwrap();
        let mut other = lq.clone();
        other.drift_offset = Arc::new(|t, _| DVector::from_element(1, 3.0 * t.sin()));
        other.noise = Arc::new(|_, _| DVector::from_element(1, 7.0));
        other.running_offset = Arc::new(|tau, t, _| tau * t + 1.0);
        other.terminal_offset = Arc::new(|_, m| m.second_moment);
        let changed = solve_riccati_family(&other, &mu).unwrap();
        assert_eq!(base.p_array(), changed.p_array());
        assert_ne!(base.linear, changed.linear);
    }

    #[test]
    fn value_interpolation_and_examples() {
        let params = CatalogParams { offset: 0.5, ..CatalogParams::default() };
        let lq = build_lq_catalog(LqCatalog::TauWeightedTerminal, &params).unwrap();
        let fam = solve_riccati_family(&lq, &flat_curve(1.0, 20, vec![0.0, 1.0])).unwrap();
        assert_eq!(value_lq(&fam, 0.1, 0.5, &[0.0]).unwrap(), fam.eta(2, 10));
        let g = (lq.terminal_weight)(0.25)[(0, 0)];
        assert!((value_lq(&fam, 0.25, 1.0, &[2.0]).unwrap() - 4.0 * g).abs() < 1e-12);
        let mid = value_lq(&fam, 0.0, 0.525, &[1.0]).unwrap();
        let (a, b) = (value_lq(&fam, 0.0, 0.5, &[1.0]).unwrap(), value_lq(&fam, 0.0, 0.55, &[1.0]).unwrap());
        assert!((mid - 0.5 * (a + b)).abs() < 1e-12);
        assert!(value_lq(&fam, 0.6, 0.5, &[1.0]).is_err());
    }

    #[test]
    fn as_printed_is_scalar_only() {
        let params = CatalogParams { dim: 2, ..CatalogParams::default() };
        let lq = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &params).unwrap();
        let cloud = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let mu = DistributionCurve::constant(uniform_grid(1.0, 10), &cloud).unwrap();
        let frozen = FrozenCurve::new(&lq, &mu).unwrap();
        let opts = RiccatiOptions { offset_form: OffsetForm::AsPrinted };
        assert!(solve_riccati_family_with(&lq, &frozen, opts).is_err());
        assert!(solve_riccati_family_with(&lq, &frozen, RiccatiOptions::default()).is_ok());
    }

    #[test]
    fn classical_matches_closed_form() {
        let lq = baseline(1.0);
        let frozen = FrozenCurve::new(&lq, &flat_curve(1.0, 100, vec![0.0, 1.0])).unwrap();
        let sol = solve_classical_riccati(&lq, &frozen, 4).unwrap();
        for (k, &t) in sol.grid.iter().enumerate() {
            assert!((sol.quad[k][(0, 0)] - 1.0 / (2.0 - t)).abs() < 1e-10);
        }
    }

    #[test]
    fn matrix_family_stays_symmetric() {
        let params = CatalogParams { dim: 3, coupling: 0.4, offset: 0.1, ..CatalogParams::default() };
        let mut lq = build_lq_catalog(LqCatalog::DissipativeMeanfield, &params).unwrap();
        lq.state_matrix = Arc::new(|_| DMatrix::from_row_slice(3, 3, &[-10.0, 1.0, 0.0, 0.5, -9.0, 2.0, 0.0, -1.0, -11.0]));
        let cloud = EmpiricalMeasure::new(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, -1.0]).unwrap();
        let mu = DistributionCurve::constant(uniform_grid(1.0, 30), &cloud).unwrap();
        let fam = solve_riccati_family(&lq, &mu).unwrap();
        for k in 0..=30 {
            for j in 0..=k {
                let p = fam.p_matrix(j, k);
                assert!((&p - p.transpose()).amax() < 1e-9);
            }
        }
    }
}
