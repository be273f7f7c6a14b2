use std::f64::consts::{LN_10, PI};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use etas_core::catalog::{read_canonical_csv, write_canonical_csv, Catalog, Domain, Event};
use etas_core::forecast::{partial_auc, ScoredCells};
use etas_core::geometry::{mahalanobis_lag, shape_matrix, AnisotropyParams};
use etas_core::intensity::{PreparedHistory, HawkesComponents};
use etas_core::kernels::{binned_kde_2d, knn_bandwidth_1d, linear_binning_2d, GridAxis};
use etas_core::misd::{
    complete_log_likelihood, fit_events, update_probabilities, FitConfig, FitResult, TriggeringMatrix,
};
use etas_core::registry::Registry;
use etas_core::simulate::{simulate, SimConfig, SpatialLaw};
use etas_core::triggering::{fit_nonseparable, LagOptions, LagTable, TriggeringConfig};

fn small_sim(seed: u64) -> SimConfig {
    let beta = LN_10;
    SimConfig {
        domain: Domain::new(0.0, 4.0, 0.0, 4.0).unwrap(),
        t_len_days: 400.0,
        mu0: 0.01,
        a0: 0.5 * (beta - 1.0) / beta * (-3.0f64).exp(),
        a: 1.0,
        omori_c: 0.5,
        omori_p: 1.5,
        spatial: SpatialLaw::Gaussian { d: 0.01 },
        eta: 1.0,
        theta_deg: 0.0,
        b_value: 1.0,
        m0: 3.0,
        seed,
        max_events: 10_000,
        background_zones: Vec::new(),
        productivity_zones: Vec::new(),
    }
}

fn quick_fit(events: &[Event], family: &str, tweak: impl FnOnce(&mut FitConfig)) -> FitResult {
    let mut cfg = FitConfig {
        family: family.parse().unwrap(),
        max_iter: 30,
        ..Default::default()
    };
    tweak(&mut cfg);
    let domain = Domain::new(0.0, 4.0, 0.0, 4.0).unwrap();
    fit_events(events, &domain, 400.0, &cfg, &Registry::builtin(), None).unwrap()
}

fn event_strategy() -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec((0.0..4.0f64, 0.0..4.0f64, 0.0..400.0f64, 3.0..6.0f64), 3..40).prop_map(|v| {
        let mut evs: Vec<Event> = v.into_iter().map(|(x, y, t, m)| Event::new(x, y, t, m)).collect();
        evs.sort_by(|a, b| a.t.total_cmp(&b.t));
        evs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_matrix_has_unit_determinant(eta in 1.0..20.0f64, theta in -7.0..7.0f64) {
        let s = shape_matrix(&AnisotropyParams::new(eta, theta).unwrap());
        prop_assert!((s[0][0] * s[1][1] - s[0][1] * s[1][0] - 1.0).abs() < 1e-12);
        prop_assert!((s[0][1] - s[1][0]).abs() < 1e-12);
    }

    #[test]
    fn lag_is_rotation_equivariant(eta in 1.0..10.0f64, theta in 0.0..PI, phi in -PI..PI, dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
        let base = mahalanobis_lag(dx, dy, &AnisotropyParams::new(eta, theta).unwrap());
        let (c, s) = (phi.cos(), phi.sin());
        let rotated = mahalanobis_lag(c * dx - s * dy, s * dx + c * dy, &AnisotropyParams::new(eta, theta + phi).unwrap());
        prop_assert!((base - rotated).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn lag_is_a_norm(eta in 1.0..10.0f64, theta in 0.0..PI, v in prop::array::uniform6(-5.0..5.0f64), c in -4.0..4.0f64) {
        let p = AnisotropyParams::new(eta, theta).unwrap();
        let d = |x: f64, y: f64| mahalanobis_lag(x, y, &p);
        let (a, b, w) = ((v[0], v[1]), (v[2], v[3]), (v[4], v[5]));
        prop_assert!((d(a.0, a.1) - d(-a.0, -a.1)).abs() < 1e-12);
        prop_assert!((d(c * a.0, c * a.1) - c.abs() * d(a.0, a.1)).abs() < 1e-10);
        // triangle on a -> b -> w
        let ab = d(b.0 - a.0, b.1 - a.1);
        let bw = d(w.0 - b.0, w.1 - b.1);
        let aw = d(w.0 - a.0, w.1 - a.1);
        prop_assert!(aw <= ab + bw + 1e-10);
    }

    #[test]
    fn linear_binning_conserves_mass(pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..3.0f64), 1..200)) {
        let points: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
        let weights: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let axis = GridAxis::new(0.0, 1.0, 33).unwrap();
        let binned = linear_binning_2d(&points, &weights, axis, axis).unwrap();
        let total: f64 = weights.iter().sum();
        prop_assert!((binned.total_mass() - total).abs() <= 1e-9 * total.max(1.0));
        if total > 0.0 {
            let d = binned_kde_2d(&points, &weights, axis, axis, 0.1).unwrap();
            prop_assert!(d.values.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn knn_bandwidths_ignore_input_order(mags in prop::collection::vec(2.0..7.0f64, 3..60), k in 1usize..5, seed in any::<u64>()) {
        prop_assume!(k < mags.len());
        let base = knn_bandwidth_1d(&mags, k, 1e-3).unwrap();
        let mut order: Vec<usize> = (0..mags.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<f64> = order.iter().map(|&i| mags[i]).collect();
        let h = knn_bandwidth_1d(&shuffled, k, 1e-3).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(h[pos], base[i]);
        }
    }

    #[test]
    fn updates_stay_row_stochastic(events in event_strategy()) {
        let Ok(lags) = LagTable::build(&events, AnisotropyParams::isotropic(), LagOptions::default()) else {
            return Ok(());
        };
        let p0 = TriggeringMatrix::uniform(&lags);
        let cfg = FitConfig::default();
        let registry = Registry::builtin();
        let domain = Domain::new(0.0, 4.0, 0.0, 4.0).unwrap();
        let Ok(fit) = fit_events(&events, &domain, 400.0, &FitConfig { max_iter: 3, ..cfg }, &registry, None) else {
            return Ok(());
        };
        let p = update_probabilities(&events, Some(&lags), &fit.model.components).unwrap();
        let mut total = 0.0;
        for i in 0..p.n() {
            prop_assert!((p.row_sum(i) - 1.0).abs() <= 1e-12);
            prop_assert!((p0.row_sum(i) - 1.0).abs() <= 1e-12);
            total += p.row_sum(i);
        }
        prop_assert!((total - events.len() as f64).abs() <= 1e-9);
    }

    #[test]
    fn pauc_ignores_monotone_transforms(pairs in prop::collection::vec((0.0..1.0f64, any::<bool>()), 4..80)) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let scores: Vec<f64> = pairs.iter().map(|p| (p.0 * 20.0).round() / 20.0).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
        let a = partial_auc(&ScoredCells::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let b = partial_auc(&ScoredCells::new(transformed, labels.clone()).unwrap()).unwrap();
        prop_assert!((a.pauc - b.pauc).abs() < 1e-12);
        prop_assert!(a.pauc <= a.full_auc + 1e-12 && a.pauc <= 0.5 && a.pauc >= 0.0);
        let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
        let r = partial_auc(&ScoredCells::new(reversed, labels).unwrap()).unwrap();
        prop_assert!((a.full_auc + r.full_auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_csv_round_trips(events in event_strategy()) {
        let domain = Domain::new(0.0, 4.0, 0.0, 4.0).unwrap();
        let cat = Catalog::new(events, domain, 400.0, 0.0).unwrap();
        let mut buf = Vec::new();
        write_canonical_csv(cat.events(), &mut buf).unwrap();
        let back = read_canonical_csv(buf.as_slice(), domain, 400.0, 0.0).unwrap();
        prop_assert_eq!(back.len(), cat.len());
        for (a, b) in cat.events().iter().zip(back.events()) {
            prop_assert!((a.lon - b.lon).abs() < 1e-9 && (a.lat - b.lat).abs() < 1e-9);
            prop_assert!((a.t - b.t).abs() < 1e-9 && (a.mag - b.mag).abs() < 1e-9);
        }
    }
}

#[test]
fn shuffled_labels_average_to_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut labels: Vec<bool> = (0..400).map(|i| i % 5 == 0).collect();
    let mut sum = 0.0;
    for _ in 0..200 {
        labels.shuffle(&mut rng);
        sum += partial_auc(&ScoredCells::new(scores.clone(), labels.clone()).unwrap()).unwrap().pauc;
    }
    let mean = sum / 200.0;
    assert!((mean - 0.125).abs() < 0.01, "mean pauc {mean}");
}

#[test]
fn unit_alpha_reproduces_constant_family() {
    let sim = simulate(&small_sim(3)).unwrap();
    let evs = sim.catalog.events();
    let forced = quick_fit(evs, "VN-1:1", |c| c.force_unit_alpha = true);
    let constant = quick_fit(evs, "CN-1:1", |_| {});
    assert_eq!(forced.probabilities, constant.probabilities);
    assert_eq!(forced.model.components, constant.model.components);
    assert_eq!(forced.model.trace, constant.model.trace);
}

#[test]
fn fitted_model_bytes_are_deterministic() {
    let sim = simulate(&small_sim(4)).unwrap();
    let a = quick_fit(sim.catalog.events(), "VN-2:1", |c| c.theta_deg = 30.0);
    let b = quick_fit(sim.catalog.events(), "VN-2:1", |c| c.theta_deg = 30.0);
    let (ja, jb) = (a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(ja, jb);
    let back = etas_core::misd::FittedModel::from_json(&ja).unwrap();
    assert_eq!(back.to_json().unwrap(), ja);
}

#[test]
fn equal_time_relabeling_leaves_surfaces_unchanged() {
    let mut evs = simulate(&small_sim(5)).unwrap().catalog.events().to_vec();
    // duplicate timestamps in a few places
    for k in [10, 20, 30] {
        evs[k + 1].t = evs[k].t;
    }
    let mut swapped = evs.clone();
    for k in [10, 20, 30] {
        swapped.swap(k, k + 1);
    }
    let a = quick_fit(&evs, "VN-1:1", |_| {});
    let b = quick_fit(&swapped, "VN-1:1", |_| {});
    let (ca, cb) = (&a.model.components, &b.model.components);
    for i in 0..40 {
        let (x, y) = (0.1 * i as f64, 4.0 - 0.09 * i as f64);
        let m = 3.0 + 0.07 * i as f64;
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-9 * u.abs().max(1.0);
        assert!(close(ca.mu.eval(x, y), cb.mu.eval(x, y)));
        assert!(close(ca.kappa.eval(m), cb.kappa.eval(m)));
        assert!(close(a.model.alpha(x, y).unwrap_or(1.0), b.model.alpha(x, y).unwrap_or(1.0)));
        let (ds, dt) = (0.01 + 0.02 * i as f64, 0.05 + 0.5 * i as f64);
        assert!(close(ca.g.as_ref().unwrap().g_at_lag(ds, dt), cb.g.as_ref().unwrap().g_at_lag(ds, dt)));
    }
}

#[test]
fn rotated_catalog_matches_anisotropic_fit() {
    let evs = simulate(&small_sim(6)).unwrap().catalog.events().to_vec();
    let theta = 0.6f64;
    let (c, s) = (theta.cos(), theta.sin());
    // rotate by -theta about the origin
    let rotated: Vec<Event> = evs
        .iter()
        .map(|e| Event::new(c * e.lon + s * e.lat, -s * e.lon + c * e.lat, e.t, e.mag))
        .collect();
    let cfg = TriggeringConfig::default();
    let la = LagTable::build(&evs, AnisotropyParams::new(2.5, theta).unwrap(), LagOptions::default()).unwrap();
    let lb = LagTable::build(&rotated, AnisotropyParams::new(2.5, 0.0).unwrap(), LagOptions::default()).unwrap();
    let w = TriggeringMatrix::uniform(&la);
    let ga = fit_nonseparable(&la, w.off_diagonal(), &cfg).unwrap();
    let gb = fit_nonseparable(&lb, w.off_diagonal(), &cfg).unwrap();
    for k in 0..50 {
        let (dx, dy, dt) = (0.03 * k as f64 - 0.7, 0.5 - 0.02 * k as f64, 0.1 + 0.7 * k as f64);
        let a = ga.eval_g(dx, dy, dt);
        let b = gb.eval_g(c * dx + s * dy, -s * dx + c * dy, dt);
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn wider_margin_never_loses_mass() {
    let evs = simulate(&small_sim(7)).unwrap().catalog.events().to_vec();
    let lags = LagTable::build(&evs, AnisotropyParams::isotropic(), LagOptions::default()).unwrap();
    let w = TriggeringMatrix::uniform(&lags);
    let mut last = 0.0;
    for margin in [0.5, 1.0, 2.0, 4.0, 6.0] {
        let cfg = TriggeringConfig {
            margin_bandwidths: margin,
            ..Default::default()
        };
        let g = fit_nonseparable(&lags, w.off_diagonal(), &cfg).unwrap();
        // node count is fixed, so wider margins coarsen the grid; allow for
        // the trapezoid error once the tail beyond the margin is negligible
        assert!(g.captured_mass >= last - 1e-5, "margin {margin}: {} < {last}", g.captured_mass);
        last = g.captured_mass;
    }
    // the rest sits below zero lag, where the grid is anchored
    assert!(last > 0.99);
}

#[test]
fn log_likelihood_is_stable_under_finer_quadrature() {
    let evs = simulate(&small_sim(8)).unwrap().catalog.events().to_vec();
    let fit = quick_fit(&evs, "VN-1:1", |_| {});
    let domain = Domain::new(0.0, 4.0, 0.0, 4.0).unwrap();
    let lags = LagTable::build(&evs, AnisotropyParams::isotropic(), LagOptions::default()).unwrap();
    let ll = |angles| {
        complete_log_likelihood(&evs, &domain, 400.0, Some(&lags), &fit.probabilities, &fit.model.components, angles).value
    };
    let (coarse, fine) = (ll(720), ll(1440));
    assert!(((coarse - fine) / fine).abs() < 1e-3, "{coarse} vs {fine}");
}

#[test]
fn intensity_bounds_and_decay() {
    let evs = simulate(&small_sim(9)).unwrap().catalog.events().to_vec();
    let fit = quick_fit(&evs, "VN-1:1", |_| {});
    let model = &fit.model;
    let full = PreparedHistory::new(model, &evs);
    let partial = PreparedHistory::new(model, &evs[..evs.len() / 2]);
    let last = evs.last().unwrap().t;
    for k in 0..30 {
        let (x, y) = (0.13 * k as f64, 3.9 - 0.12 * k as f64);
        let t = last * (k as f64 + 0.5) / 30.0;
        let mu = model.background(x, y);
        let lf = full.intensity(model, x, y, t);
        assert!(lf >= mu && mu >= 0.0);
        // more history never lowers the intensity
        let after = last + 0.5 * (k as f64 + 1.0);
        assert!(full.intensity(model, x, y, after) >= partial.intensity(model, x, y, after));
        let far = last + model.max_lag_days() + 1.0;
        assert_eq!(full.intensity(model, x, y, far), mu);
    }
}
