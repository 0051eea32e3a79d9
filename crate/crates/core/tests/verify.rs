use std::sync::Arc;

use nalgebra::DVector;
use tic_mkv::equilibrium::zero_strategy;
use tic_mkv::model::CatalogParams;
use tic_mkv::verify::{
    constant_curve, default_ladder, spike_test, spike_test_strategy, time_consistent_reduction_check, McOptions,
    ProbeControls, ProbePoint,
};
use tic_mkv::{build_lq_catalog, solve_equilibrium, EmpiricalMeasure, EquilibriumOptions, InitialLaw, LqCatalog, Problem};

fn probes() -> Vec<ProbePoint> {
    [(0.0, -0.5), (0.25, 0.5), (0.5, 0.0)].iter().map(|&(t, x)| ProbePoint { t, x: vec![x] }).collect()
}

fn baseline() -> (Problem, InitialLaw) {
    let params = CatalogParams::default();
    let lq = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &params).unwrap();
    (Problem::Lq(lq), LqCatalog::TimeConsistentBaseline.default_initial(&params))
}

#[test]
fn baseline_equilibrium_passes_and_zero_control_fails() {
    let (problem, initial) = baseline();
    let opts = EquilibriumOptions { n_particles: 2000, steps: 100, seed: 1, ..EquilibriumOptions::default() };
    let eq = solve_equilibrium(&problem, &initial, &opts).unwrap();
    let mc = McOptions { n_paths: 4000, seed: 2, workers: None };
    let ladder = default_ladder(1.0);
    let good = spike_test(&problem, &eq, &probes(), &ProbeControls::default(), &ladder, &mc).unwrap();
    assert!(good.overall_pass, "{:?}", good.probes.iter().filter(|p| !p.pass).collect::<Vec<_>>());
    assert_eq!(good.probes.len(), 12);

    let zero = zero_strategy(&problem, 100);
    let bad = spike_test_strategy(&problem, &eq.mu_star, &zero, None, &probes(), &ProbeControls::default(), &ladder, &mc).unwrap();
    assert!(!bad.overall_pass);
    assert!(bad.probes.iter().any(|p| p.limit > p.threshold));
}

#[test]
fn reduction_gaps() {
    let cloud = EmpiricalMeasure::from_scalars(vec![-1.0, 0.0, 2.0]).unwrap();
    let lq = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &CatalogParams::default()).unwrap();
    let r = time_consistent_reduction_check(&lq, &constant_curve(1.0, 2000, &cloud).unwrap()).unwrap();
    assert!(r.gain_gap <= 1e-5, "{r:?}");
    assert_eq!(r.offset_gap, 0.0);

    let coupled = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &CatalogParams { coupling: 0.7, offset: 0.2, ..CatalogParams::default() }).unwrap();
    let r = time_consistent_reduction_check(&coupled, &constant_curve(1.0, 400, &cloud).unwrap()).unwrap();
    assert!(r.gain_gap <= 1e-4 && r.offset_gap <= 1e-4, "{r:?}");
}

#[test]
fn reduction_rejects_tau_dependent_weights() {
    let lq = build_lq_catalog(LqCatalog::TauWeightedTerminal, &CatalogParams::default()).unwrap();
    let cloud = EmpiricalMeasure::from_scalars(vec![0.0, 1.0]).unwrap();
    assert!(time_consistent_reduction_check(&lq, &constant_curve(1.0, 50, &cloud).unwrap()).is_err());

    let mut forced = build_lq_catalog(LqCatalog::TimeConsistentBaseline, &CatalogParams::default()).unwrap();
    forced.drift_offset = Arc::new(|t, _| DVector::from_element(1, t.sin()));
    let r = time_consistent_reduction_check(&forced, &constant_curve(1.0, 400, &cloud).unwrap()).unwrap();
    assert!(r.offset_gap <= 1e-4, "{r:?}");
}
