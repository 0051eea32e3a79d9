use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tic_mkv::measures::{coupling_bound_check, holder_profile, uniform_grid};
use tic_mkv::{curve_distance_m, moments, wasserstein2, DistributionCurve, EmpiricalMeasure, W2Method};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_cloud(n: usize, mean: f64, seed: u64) -> EmpiricalMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..n).map(|_| mean + gauss(&mut rng)).collect::<Vec<f64>>();
    EmpiricalMeasure::from_scalars(v).unwrap()
}

fn cloud(values: Vec<f64>, dim: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::new(dim, values).unwrap()
}

#[test]
fn gaussian_closed_form() {
    let a = normal_cloud(10_000, 0.0, 1);
    let b = normal_cloud(10_000, 2.0, 2);
    let w = wasserstein2(&a, &b, W2Method::Exact1d).unwrap();
    assert!((w - 2.0).abs() < 0.05, "w = {w}");
}

#[test]
fn large_sample_second_moment() {
    let m = moments(&normal_cloud(100_000, 0.0, 3), &[]);
    assert!((m.second_moment - 1.0).abs() < 0.02);
}

#[test]
fn permuted_sample_has_zero_distance_but_positive_coupling_cost() {
    let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut y = x.clone();
    y.reverse();
    let r = coupling_bound_check(&cloud(x, 1), &cloud(y, 1)).unwrap();
    assert!(r.w2 < 1e-12);
    assert!(r.l2 > 0.0);
    assert!(r.ok);
}

#[test]
fn brownian_curves_from_shifted_starts() {
    let grid = uniform_grid(1.0, 10);
    let base: Vec<EmpiricalMeasure> = (0..=10).map(|k| normal_cloud(200, 0.0, 100 + k as u64)).collect();
    let shifted: Vec<EmpiricalMeasure> = base
        .iter()
        .map(|m| EmpiricalMeasure::from_scalars(m.points().iter().map(|v| v + 1.0).collect()).unwrap())
        .collect();
    let c1 = DistributionCurve::new(grid.clone(), base).unwrap();
    let c2 = DistributionCurve::new(grid, shifted).unwrap();
    assert!((curve_distance_m(&c1, &c2).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn holder_profile_of_brownian_curve() {
    let grid = uniform_grid(1.0, 20);
    let base = normal_cloud(5000, 0.0, 9);
    let measures = grid
        .iter()
        .map(|t| EmpiricalMeasure::from_scalars(base.points().iter().map(|v| v * t.sqrt()).collect()).unwrap())
        .collect();
    let c = DistributionCurve::new(grid, measures).unwrap();
    assert!(holder_profile(&c) <= 1.05);
}

fn small_cloud(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (1usize..=8).prop_flat_map(move |n| prop::collection::vec(-5.0f64..5.0, n * dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact1d_agrees_with_assignment(n in 1usize..=128, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| 3.0 * gauss(&mut rng) + 0.5).collect();
        let (a, b) = (cloud(x, 1), cloud(y, 1));
        let e = wasserstein2(&a, &b, W2Method::Exact1d).unwrap();
        let h = wasserstein2(&a, &b, W2Method::Assignment).unwrap();
        prop_assert!((e - h).abs() <= 1e-10, "exact {e} assignment {h}");
    }

    #[test]
    fn metric_axioms_exact(dim in 1usize..=2, seed in any::<u64>(), n in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || cloud((0..n * dim).map(|_| gauss(&mut rng)).collect(), dim);
        let (a, b, c) = (draw(), draw(), draw());
        let method = W2Method::auto(dim, n);
        let w = |p: &EmpiricalMeasure, q: &EmpiricalMeasure| wasserstein2(p, q, method).unwrap();
        prop_assert!(w(&a, &a).abs() < 1e-12);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() < 1e-12);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
    }

    #[test]
    fn coupling_bound_holds(x in small_cloud(2), shift in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + shift + 0.3 * gauss(&mut rng)).collect();
        let r = coupling_bound_check(&cloud(x, 2), &cloud(y, 2)).unwrap();
        prop_assert!(r.ok, "w2^2 = {} l2 = {}", r.w2 * r.w2, r.l2);
    }

    #[test]
    fn curve_metric_triangle(seed in any::<u64>()) {
        let grid = uniform_grid(1.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut curve = || {
            let ms = (0..5).map(|_| cloud((0..6).map(|_| gauss(&mut rng)).collect(), 1)).collect();
            DistributionCurve::new(grid.clone(), ms).unwrap()
        };
        let (a, b, c) = (curve(), curve(), curve());
        let m = |p: &DistributionCurve, q: &DistributionCurve| curve_distance_m(p, q).unwrap();
        prop_assert!(m(&a, &c) <= m(&a, &b) + m(&b, &c) + 1e-9);
        prop_assert!((m(&a, &b) - m(&b, &a)).abs() < 1e-12);
    }
}
