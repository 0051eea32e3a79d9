use proptest::prelude::*;
use tic_mkv::registry::{build_general_catalog, GeneralCatalog, GeneralParams};
use tic_mkv::simulate::{moment_report, picard_iterate_law, simulate_n_player};
use tic_mkv::strategy::ZeroFeedback;
use tic_mkv::{build_lq_catalog, curve_distance_m, moments, simulate_t1, InitialLaw, LqCatalog, SimOptions};
use tic_mkv::model::CatalogParams;

fn ou(coupling: f64) -> tic_mkv::ModelSpec {
    build_general_catalog(GeneralCatalog::OuMeanfield, &GeneralParams { coupling, ..GeneralParams::default() }).unwrap()
}

#[test]
fn brownian_second_moment_tracks_time() {
    let model = build_general_catalog(GeneralCatalog::Brownian, &GeneralParams::default()).unwrap();
    let n = 10_000;
    let (curve, _) = simulate_t1(&model, &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![0.0] }, &SimOptions::new(n, 200, 11)).unwrap();
    for (k, t) in curve.grid().iter().enumerate().skip(1) {
        let s = moments(curve.measure(k), &[]).second_moment;
        let stderr = (2.0 * t * t / n as f64).sqrt();
        assert!((s - t).abs() <= 3.0 * stderr + 1e-12, "t = {t}: {s}");
    }
}

#[test]
fn meanfield_ou_mean_follows_ode() {
    let n = 10_000;
    for c in [0.0, 0.5] {
        let (curve, _) = simulate_t1(&ou(c), &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![1.0] }, &SimOptions::new(n, 200, 5)).unwrap();
        let mut worst: f64 = 0.0;
        for (k, t) in curve.grid().iter().enumerate().skip(1) {
            let m = moments(curve.measure(k), &[]);
            let exact = ((c - 1.0) * t).exp();
            let stderr = (m.variance() / n as f64).sqrt();
            worst = worst.max((m.mean[0] - exact).abs() / stderr);
        }
        // the Euler bias at K = 200 is far below one standard error
        assert!(worst <= 3.5, "c = {c}: worst deviation {worst} standard errors");
    }
}

#[test]
fn picard_matches_particle_system() {
    let model = build_lq_catalog(LqCatalog::DissipativeMeanfield, &CatalogParams { coupling: 0.5, ..CatalogParams::default() }).unwrap();
    let initial = LqCatalog::DissipativeMeanfield.default_initial(&CatalogParams::default());
    let opts = SimOptions::new(10_000, 100, 3);
    let (direct, _) = simulate_t1(&model, &ZeroFeedback(1), &initial, &opts).unwrap();
    let picard = picard_iterate_law(&model, &ZeroFeedback(1), &initial, &opts, 1e-6, 30).unwrap();
    assert!(curve_distance_m(&direct, &picard.curve).unwrap() < 1e-3);
    let d = &picard.distances;
    assert!(d.windows(2).all(|w| w[1] <= w[0]), "{d:?}");
}

#[test]
fn brownian_running_maximum() {
    let model = build_general_catalog(GeneralCatalog::Brownian, &GeneralParams::default()).unwrap();
    let (_, paths) = simulate_t1(&model, &ZeroFeedback(1), &InitialLaw::Dirac { point: vec![0.0] }, &SimOptions::new(4000, 200, 2)).unwrap();
    let r = moment_report(&paths, 1.0).unwrap();
    assert!(r.sup_second >= 1.0 && r.sup_second <= 4.0, "{r:?}");
    assert!(r.sup_2plus.is_finite());
}

#[test]
fn uncoupled_players_match_particle_system() {
    let model = ou(0.0);
    let initial = InitialLaw::Gaussian { mean: vec![0.5], sd: vec![1.0] };
    let opts = SimOptions::new(300, 50, 8);
    let players = simulate_n_player(&model, &ZeroFeedback(1), &initial, &opts).unwrap();
    let (system, _) = simulate_t1(&model, &ZeroFeedback(1), &initial, &opts).unwrap();
    assert_eq!(players, system);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn paths_ignore_worker_count(seed in any::<u64>(), c in 0.0f64..1.0) {
        let model = ou(c);
        let initial = InitialLaw::Gaussian { mean: vec![1.0], sd: vec![0.5] };
        let run = |w| simulate_t1(&model, &ZeroFeedback(1), &initial, &SimOptions::new(500, 40, seed).with_workers(Some(w))).unwrap().1;
        let one = run(1);
        prop_assert_eq!(&one.values, &run(3).values);
        prop_assert_eq!(&one.values, &run(8).values);
    }
}
