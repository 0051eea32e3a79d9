//! Empirical measures, the Wasserstein-2 distance and distribution curves.
//!
//! All measures are equal-weight point clouds. Curves are sequences of clouds on
//! a uniform time grid and carry the uniform metric
//! `m(c1, c2) = max_k w(c1(t_k), c2(t_k))`.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Above this count, multi-dimensional W2 switches from exact assignment to
/// sliced projections.
pub const ASSIGNMENT_LIMIT: usize = 512;
/// Projections used by the automatic sliced fallback.
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Scalar functional `phi(x)` whose cloud average feeds measure-dependent
/// coefficients.
pub type Functional = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a cloud from row-major points (`count * dim` values).
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: points.len() % dim });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measure support".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn dirac(point: &[f64], count: usize) -> Result<Self> {
        let mut points = Vec::with_capacity(point.len() * count);
        for _ in 0..count {
            points.extend_from_slice(point);
        }
        Self::new(point.len(), points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    /// Sorted values of coordinate `axis`.
    pub fn sorted_axis(&self, axis: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.points.iter().skip(axis).step_by(self.dim).copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Linear-interpolated quantile of a one-dimensional cloud.
    pub fn quantile(&self, p: f64) -> f64 {
        let sorted = self.sorted_axis(0);
        quantile_sorted(&sorted, p)
    }
}

pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    /// Sorted-sample coupling; exact in one dimension.
    Exact1d,
    /// Exact optimal matching between equal-count clouds (cubic cost).
    Assignment,
    /// Monte-Carlo average over random directions of one-dimensional distances.
    /// This is an approximation and is reported as such.
    Sliced { projections: usize, seed: u64 },
}

impl W2Method {
    /// Exact where feasible: sorting in 1-D, assignment up to
    /// [`ASSIGNMENT_LIMIT`] points, sliced beyond.
    pub fn auto(dim: usize, count: usize) -> Self {
        if dim == 1 {
            W2Method::Exact1d
        } else if count <= ASSIGNMENT_LIMIT {
            W2Method::Assignment
        } else {
            W2Method::Sliced { projections: DEFAULT_PROJECTIONS, seed: 0 }
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, W2Method::Sliced { .. })
    }
}

pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, method: W2Method) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, found: nu.dim });
    }
    match method {
        W2Method::Exact1d => {
            if mu.dim != 1 {
                return Err(Error::InvalidParameter("exact1d requires dimension 1".into()));
            }
            if mu.count() != nu.count() {
                return Err(Error::CountMismatch(mu.count(), nu.count()));
            }
            Ok(w2_sorted(&mu.sorted_axis(0), &nu.sorted_axis(0)))
        }
        W2Method::Assignment => {
            if mu.count() != nu.count() {
                return Err(Error::CountMismatch(mu.count(), nu.count()));
            }
            Ok(w2_assignment(mu, nu))
        }
        W2Method::Sliced { projections, seed } => Ok(w2_sliced(mu, nu, projections, seed)),
    }
}

/// W2 between equal-count sorted samples: root-mean-square of the differences.
pub(crate) fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// W2 between sorted samples of possibly different sizes, integrating the
/// squared difference of the two quantile functions.
fn w2_quantile(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return w2_sorted(a, b);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut s = 0.0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - s) * d * d;
        s = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

fn w2_sliced(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, projections: usize, seed: u64) -> f64 {
    let dim = mu.dim;
    if dim == 1 {
        return w2_quantile(&mu.sorted_axis(0), &nu.sorted_axis(0));
    }
    let mut rng = stream(seed, Domain::Projection, 0);
    let mut total = 0.0;
    for _ in 0..projections.max(1) {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |m: &EmpiricalMeasure| {
            let mut v: Vec<f64> = m
                .points
                .chunks_exact(dim)
                .map(|p| p.iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let w = w2_quantile(&project(mu), &project(nu));
        total += w * w;
    }
    // scaled by sqrt(dim): a translation is then recovered in expectation over directions
    (total / projections.max(1) as f64 * dim as f64).sqrt()
}

fn w2_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let n = mu.count();
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                mu.point(i).iter().zip(nu.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
        })
        .collect();
    let assignment = hungarian(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total.max(0.0) / n as f64).sqrt()
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (shortest augmenting paths with potentials, O(n^3)). Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Uniform grid `0 = t_0 < ... < t_K = horizon`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps as f64;
    (0..=steps).map(|k| if k == steps { horizon } else { k as f64 * h }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionCurve {
    grid: Vec<f64>,
    measures: Vec<EmpiricalMeasure>,
}

impl DistributionCurve {
    pub fn new(grid: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::GridMismatch("a curve needs at least two nodes".into()));
        }
        if grid.len() != measures.len() {
            return Err(Error::GridMismatch(format!(
                "{} nodes but {} measures",
                grid.len(),
                measures.len()
            )));
        }
        let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        if !(h > 0.0) {
            return Err(Error::GridMismatch("grid must be strictly increasing".into()));
        }
        // spacing tolerance is relative to the span, which absorbs k*h rounding
        let tol = 1e-12 * (grid[grid.len() - 1] - grid[0]).abs().max(1.0);
        for (k, w) in grid.windows(2).enumerate() {
            if ((w[1] - w[0]) - h).abs() > tol {
                return Err(Error::GridMismatch(format!("non-uniform spacing at node {k}")));
            }
        }
        let (dim, count) = (measures[0].dim(), measures[0].count());
        for m in &measures {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: m.dim() });
            }
            if m.count() != count {
                return Err(Error::CountMismatch(count, m.count()));
            }
        }
        Ok(Self { grid, measures })
    }

    /// Curve that stays at `measure` for every node of `grid`.
    pub fn constant(grid: Vec<f64>, measure: &EmpiricalMeasure) -> Result<Self> {
        let measures = vec![measure.clone(); grid.len()];
        Self::new(grid, measures)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn measure(&self, k: usize) -> &EmpiricalMeasure {
        &self.measures[k]
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn step(&self) -> f64 {
        (self.horizon() - self.grid[0]) / self.steps() as f64
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    pub fn count(&self) -> usize {
        self.measures[0].count()
    }

    /// Index of the node equal to `t` (within a relative 1e-9 of the step).
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let s = (t - self.grid[0]) / self.step();
        let r = s.round();
        if (s - r).abs() < 1e-9 && r >= 0.0 && (r as usize) <= self.steps() {
            Some(r as usize)
        } else {
            None
        }
    }

    /// Restriction to nodes `k0..=K`, used for restarts from an interior time.
    pub fn tail(&self, k0: usize) -> Result<Self> {
        Self::new(self.grid[k0..].to_vec(), self.measures[k0..].to_vec())
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.grid.len() == other.grid.len()
            && self.grid.iter().zip(&other.grid).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
    }

    /// Largest second moment along the curve.
    pub fn sup_second_moment(&self) -> f64 {
        self.measures.iter().map(|m| moments(m, &[]).second_moment).fold(0.0, f64::max)
    }

    /// CSV with columns `t, mean_1..mean_d, second_moment` and, for `d = 1`,
    /// the nine deciles `q10..q90`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("mean_{i}")));
        header.push("second_moment".into());
        if d == 1 {
            header.extend((1..=9).map(|i| format!("q{}", i * 10)));
        }
        writeln!(out, "{}", header.join(","))?;
        for (t, m) in self.grid.iter().zip(&self.measures) {
            let mv = moments(m, &[]);
            let mut row = vec![t.to_string()];
            row.extend(mv.mean.iter().map(|v| v.to_string()));
            row.push(mv.second_moment.to_string());
            if d == 1 {
                let sorted = m.sorted_axis(0);
                row.extend((1..=9).map(|i| quantile_sorted(&sorted, i as f64 / 10.0).to_string()));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Uniform metric between curves on the same grid, with the W2 method picked
/// by [`W2Method::auto`].
pub fn curve_distance_m(c1: &DistributionCurve, c2: &DistributionCurve) -> Result<f64> {
    let method = W2Method::auto(c1.dim(), c1.count());
    curve_distance_m_with(c1, c2, method)
}

pub fn curve_distance_m_with(c1: &DistributionCurve, c2: &DistributionCurve, method: W2Method) -> Result<f64> {
    Ok(node_distances(c1, c2, method)?.into_iter().fold(0.0, f64::max))
}

/// W2 at every node.
pub fn node_distances(c1: &DistributionCurve, c2: &DistributionCurve, method: W2Method) -> Result<Vec<f64>> {
    if !c1.same_grid(c2) {
        return Err(Error::GridMismatch("curves live on different grids".into()));
    }
    if c1.dim() != c2.dim() {
        return Err(Error::DimensionMismatch { expected: c1.dim(), found: c2.dim() });
    }
    c1.measures
        .par_iter()
        .zip(c2.measures.par_iter())
        .map(|(a, b)| wasserstein2(a, b, method))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingReport {
    pub w2: f64,
    pub l2: f64,
    pub ok: bool,
}

/// Checks `w(law X, law Y)^2 <= E|X - Y|^2` for the coupling that pairs
/// sample `i` of `x` with sample `i` of `y`.
pub fn coupling_bound_check(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<CouplingReport> {
    if x.count() != y.count() {
        return Err(Error::CountMismatch(x.count(), y.count()));
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), found: y.dim() });
    }
    let l2 = x.points.iter().zip(&y.points).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.count() as f64;
    let w2 = wasserstein2(x, y, W2Method::auto(x.dim(), x.count()))?;
    Ok(CouplingReport { w2, l2, ok: w2 * w2 <= l2 + 1e-9 })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentVector {
    pub mean: Vec<f64>,
    pub second_moment: f64,
    pub generalized: Vec<f64>,
}

impl MomentVector {
    /// Moments of a point mass, handy for coefficient probes.
    pub fn of_point(x: &[f64], functionals: &[Functional]) -> Self {
        Self {
            mean: x.to_vec(),
            second_moment: x.iter().map(|v| v * v).sum(),
            generalized: functionals.iter().map(|f| f(x)).collect(),
        }
    }

    pub fn mean_scalar(&self) -> f64 {
        self.mean[0]
    }

    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean.iter().map(|m| m * m).sum::<f64>()
    }
}

/// Sample moments of a cloud. Summation runs sequentially in particle order.
pub fn moments(mu: &EmpiricalMeasure, functionals: &[Functional]) -> MomentVector {
    let sums = MomentSums::accumulate(mu.points(), mu.dim(), functionals);
    sums.average(mu.count() as f64)
}

/// Raw sums behind [`MomentVector`]; leave-one-out moments subtract one point.
#[derive(Debug, Clone)]
pub(crate) struct MomentSums {
    pub mean: Vec<f64>,
    pub second: f64,
    pub generalized: Vec<f64>,
}

impl MomentSums {
    pub fn accumulate(points: &[f64], dim: usize, functionals: &[Functional]) -> Self {
        let mut mean = vec![0.0; dim];
        let mut second = 0.0;
        let mut generalized = vec![0.0; functionals.len()];
        for p in points.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
                second += v * v;
            }
            for (g, f) in generalized.iter_mut().zip(functionals) {
                *g += f(p);
            }
        }
        Self { mean, second, generalized }
    }

    pub fn average(&self, n: f64) -> MomentVector {
        MomentVector {
            mean: self.mean.iter().map(|v| v / n).collect(),
            second_moment: self.second / n,
            generalized: self.generalized.iter().map(|v| v / n).collect(),
        }
    }

    pub fn without(&self, x: &[f64], functionals: &[Functional], n_rest: f64) -> MomentVector {
        MomentVector {
            mean: self.mean.iter().zip(x).map(|(s, v)| (s - v) / n_rest).collect(),
            second_moment: (self.second - x.iter().map(|v| v * v).sum::<f64>()) / n_rest,
            generalized: self.generalized.iter().zip(functionals).map(|(s, f)| (s - f(x)) / n_rest).collect(),
        }
    }
}

/// `max_{s != t} w^2(mu(t), mu(s)) / |t - s|` over all node pairs.
///
/// One-dimensional curves use exact sorted couplings; higher dimensions use
/// sliced W2 to keep the pair sweep affordable.
pub fn holder_profile(c: &DistributionCurve) -> f64 {
    let k = c.grid.len();
    if c.dim() == 1 {
        let sorted: Vec<Vec<f64>> = c.measures.par_iter().map(|m| m.sorted_axis(0)).collect();
        (0..k)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..k)
                    .map(|j| {
                        let w = w2_sorted(&sorted[i], &sorted[j]);
                        w * w / (c.grid[j] - c.grid[i])
                    })
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    } else {
        let method = W2Method::Sliced { projections: DEFAULT_PROJECTIONS, seed: 0 };
        (0..k)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..k)
                    .map(|j| {
                        let w = wasserstein2(&c.measures[i], &c.measures[j], method).unwrap_or(0.0);
                        w * w / (c.grid[j] - c.grid[i])
                    })
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(values: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(values.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_measures() {
        assert!(matches!(EmpiricalMeasure::new(1, vec![]), Err(Error::EmptyMeasure)));
        assert!(EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(matches!(EmpiricalMeasure::new(1, vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn w2_translation() {
        let w = wasserstein2(&cloud(&[0.0, 1.0]), &cloud(&[1.0, 2.0]), W2Method::Exact1d).unwrap();
        assert_eq!(w, 1.0);
        let a = cloud(&[3.0, -1.0, 0.5]);
        assert_eq!(wasserstein2(&a, &a, W2Method::Exact1d).unwrap(), 0.0);
        assert_eq!(wasserstein2(&a, &a, W2Method::Assignment).unwrap(), 0.0);
    }

    #[test]
    fn w2_errors() {
        let a = cloud(&[0.0, 1.0]);
        let b = cloud(&[0.0, 1.0, 2.0]);
        assert!(matches!(wasserstein2(&a, &b, W2Method::Exact1d), Err(Error::CountMismatch(2, 3))));
        assert!(matches!(wasserstein2(&a, &b, W2Method::Assignment), Err(Error::CountMismatch(2, 3))));
        let p = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(wasserstein2(&a, &p, W2Method::Assignment), Err(Error::DimensionMismatch { .. })));
        assert!(wasserstein2(&p, &p, W2Method::Exact1d).is_err());
        // sliced tolerates unequal counts
        assert!(wasserstein2(&a, &b, W2Method::Sliced { projections: 4, seed: 1 }).is_ok());
    }

    #[test]
    fn unequal_count_quantile_matches_replication() {
        // {0, 1} against {0, 0, 1, 1} is the same law
        let w = w2_quantile(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]);
        assert!(w.abs() < 1e-15);
        let w = w2_quantile(&[0.0], &[1.0, 3.0]);
        assert!((w - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&cost, n);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            assert!((got - best).abs() < 1e-12, "n = {n}");
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn sliced_recovers_translation_in_2d() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![3.0, 4.0, 4.0, 4.0, 3.0, 5.0]).unwrap();
        let exact = wasserstein2(&a, &b, W2Method::Assignment).unwrap();
        assert!((exact - 5.0).abs() < 1e-12);
        let sliced = wasserstein2(&a, &b, W2Method::Sliced { projections: 2000, seed: 3 }).unwrap();
        assert!((sliced - 5.0).abs() < 0.05, "{sliced}");
    }

    #[test]
    fn curve_metric_takes_sup() {
        let grid = uniform_grid(1.0, 2);
        let base = cloud(&[0.0, 1.0]);
        let c1 = DistributionCurve::constant(grid.clone(), &base).unwrap();
        let mut ms = vec![base.clone(); 3];
        ms[1] = cloud(&[0.7, 1.7]);
        let c2 = DistributionCurve::new(grid.clone(), ms).unwrap();
        assert_eq!(curve_distance_m(&c1, &c1).unwrap(), 0.0);
        assert!((curve_distance_m(&c1, &c2).unwrap() - 0.7).abs() < 1e-15);
        let other = DistributionCurve::constant(uniform_grid(2.0, 2), &base).unwrap();
        assert!(matches!(curve_distance_m(&c1, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn curve_rejects_nonuniform_grid() {
        let m = cloud(&[0.0]);
        assert!(DistributionCurve::new(vec![0.0, 0.1, 0.3], vec![m.clone(), m.clone(), m]).is_err());
    }

    #[test]
    fn coupling_examples() {
        let x = cloud(&[0.0, 1.0, 2.0]);
        let r = coupling_bound_check(&x, &x).unwrap();
        assert!(r.ok && r.w2 == 0.0 && r.l2 == 0.0);
        let y = cloud(&[1.0, 2.0, 3.0]);
        let r = coupling_bound_check(&x, &y).unwrap();
        assert!(r.ok);
        assert!((r.w2 - 1.0).abs() < 1e-15 && (r.l2 - 1.0).abs() < 1e-15);
        let p = cloud(&[2.0, 0.0, 1.0]);
        let r = coupling_bound_check(&x, &p).unwrap();
        // brute force: (0-2)^2 + (1-0)^2 + (2-1)^2 = 6, over 3
        assert_eq!(r.w2, 0.0);
        assert!((r.l2 - 2.0).abs() < 1e-15 && r.ok);
        assert!(coupling_bound_check(&x, &cloud(&[1.0])).is_err());
    }

    #[test]
    fn moment_examples() {
        let m = moments(&cloud(&[3.0]), &[]);
        assert_eq!(m.mean, vec![3.0]);
        assert_eq!(m.second_moment, 9.0);
        let m = moments(&cloud(&[-1.0, 1.0]), &[]);
        assert_eq!(m.mean, vec![0.0]);
        assert_eq!(m.second_moment, 1.0);
        let cube: Functional = Arc::new(|x: &[f64]| x[0].powi(3));
        let m = moments(&cloud(&[1.0, 2.0]), &[cube]);
        assert_eq!(m.generalized, vec![4.5]);
    }

    #[test]
    fn leave_one_out_matches_direct() {
        let pts = vec![0.5, -1.0, 2.0, 4.0];
        let sums = MomentSums::accumulate(&pts, 1, &[]);
        let loo = sums.without(&[2.0], &[], 3.0);
        let direct = moments(&cloud(&[0.5, -1.0, 4.0]), &[]);
        assert!((loo.mean[0] - direct.mean[0]).abs() < 1e-15);
        assert!((loo.second_moment - direct.second_moment).abs() < 1e-14);
    }

    #[test]
    fn holder_examples() {
        let grid = uniform_grid(2.0, 4);
        let c = DistributionCurve::constant(grid.clone(), &cloud(&[1.0, 2.0])).unwrap();
        assert_eq!(holder_profile(&c), 0.0);
        // point mass moving at unit speed: w = |t - s|, ratio |t - s|, max = T
        let ms = grid.iter().map(|t| cloud(&[*t, *t])).collect();
        let c = DistributionCurve::new(grid, ms).unwrap();
        assert!((holder_profile(&c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let grid = uniform_grid(1.0, 1);
        let c = DistributionCurve::constant(grid, &cloud(&[0.0, 1.0])).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,mean_1,second_moment,q10,q20,q30,q40,q50,q60,q70,q80,q90");
        assert!(lines[1].starts_with("0,0.5,0.5,0.1,"));
        assert_eq!(lines.len(), 3);
    }
}
