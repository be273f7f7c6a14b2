use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn etas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etas"))
        .args(args)
        .env("ETAS_THREADS", "1")
        .output()
        .expect("run etas")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary json")
}

fn sim_config(seed: u64, mu0: f64) -> Value {
    let beta = std::f64::consts::LN_10;
    json!({
        "domain": {"lon_min": 0.0, "lon_max": 2.0, "lat_min": 0.0, "lat_max": 2.0},
        "t_len_days": 330.0,
        "mu0": mu0,
        "a0": 0.5 * (beta - 1.0) / beta * (-3.0f64).exp(),
        "a": 1.0,
        "omori_c": 0.5,
        "omori_p": 1.5,
        "spatial": {"kind": "gaussian", "d": 0.01},
        "b_value": 1.0,
        "m0": 3.0,
        "seed": seed
    })
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates into `dir/sim` and returns the run config path for a canonical
/// catalog with 300 training and 30 forecast days.
fn simulated_run(dir: &Path, seed: u64) -> PathBuf {
    let sim_cfg = dir.join("sim.json");
    write_json(&sim_cfg, &sim_config(seed, 0.06));
    let sim_out = dir.join("sim");
    stdout_json(&etas(&["simulate", "--config", s(&sim_cfg), "--out", s(&sim_out)]));
    let run = dir.join("run.json");
    write_json(
        &run,
        &json!({
            "catalog": "sim/catalog.csv",
            "catalog_format": "canonical",
            "domain": {"lon_min": 0.0, "lon_max": 2.0, "lat_min": 0.0, "lat_max": 2.0},
            "train_len_days": 300.0,
            "forecast_len_days": 30.0,
            "fit": {"max_iter": 25},
            "grid": {"forecast_cell_deg": 0.2},
            "evaluation": {"n_boot": 200}
        }),
    );
    run
}

#[test]
fn simulate_is_reproducible_and_summarized() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    write_json(&cfg, &sim_config(11, 0.06));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = stdout_json(&etas(&["simulate", "--config", s(&cfg), "--out", s(&a)]));
    stdout_json(&etas(&["simulate", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["catalog.csv", "labels.csv", "summary.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let n = summary["n_events"].as_u64().unwrap();
    assert!(n > 0);
    let frac = summary["mainshock_fraction"].as_f64().unwrap();
    assert!(frac > 0.0 && frac <= 1.0);
    let echo: Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert!(echo["tool"].as_str().unwrap().starts_with("etas "));
    assert_eq!(echo["config"]["seed"], 11);
    let rows = std::fs::read_to_string(a.join("catalog.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, n + 1);
}

#[test]
fn no_immigrants_gives_header_only_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    write_json(&cfg, &sim_config(1, 0.0));
    let out = tmp.path().join("empty");
    let summary = stdout_json(&etas(&["simulate", "--config", s(&cfg), "--out", s(&out)]));
    assert_eq!(summary["n_events"], 0);
    assert_eq!(std::fs::read_to_string(out.join("catalog.csv")).unwrap().trim(), "lon,lat,t_days,mag");
}

#[test]
fn supercritical_simulation_is_a_config_error_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    write_json(&cfg, &sim_config(1, 0.06));
    let out = tmp.path().join("boom");
    let r = etas(&["simulate", "--config", s(&cfg), "--out", s(&out), "--set", "a0=1.0"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn fit_decodes_family_and_writes_surfaces() {
    let tmp = tempfile::tempdir().unwrap();
    let run = simulated_run(tmp.path(), 5);
    let cs = tmp.path().join("cs");
    let report = stdout_json(&etas(&["fit", "--config", s(&run), "--out", s(&cs), "--family", "CS-1:1"]));
    assert_eq!(report["varying_alpha"], false);
    assert_eq!(report["separable"], true);
    let model: Value = serde_json::from_slice(&std::fs::read(cs.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["family"], "CS-1:1");
    assert_eq!(model["components"]["alpha"]["kind"], "constant");
    assert_eq!(model["components"]["g"]["shape"]["kind"], "separable");
    for f in ["trace.csv", "mu_grid.csv", "alpha_cells.csv", "kappa_curve.csv", "g0_lattice.csv", "catalog.csv", "report.json"] {
        assert!(cs.join(f).exists(), "{f}");
    }
    // 2 x 2 degrees at 0.05 and 0.2 degree spacing
    assert_eq!(std::fs::read_to_string(cs.join("mu_grid.csv")).unwrap().lines().count(), 1601);
    assert_eq!(std::fs::read_to_string(cs.join("alpha_cells.csv")).unwrap().lines().count(), 101);

    let vn = tmp.path().join("vn");
    let report = stdout_json(&etas(&[
        "fit", "--config", s(&run), "--out", s(&vn), "--family", "VN-2:1", "--theta-deg", "30", "--dump-grids",
    ]));
    assert_eq!(report["varying_alpha"], true);
    assert_eq!(report["separable"], false);
    assert_eq!(report["eta"], 2.0);
    assert!(vn.join("triggering_grid.csv").exists());
    let model: Value = serde_json::from_slice(&std::fs::read(vn.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["components"]["alpha"]["kind"], "varying");
    assert_eq!(model["components"]["g"]["shape"]["kind"], "non_separable");
}

#[test]
fn anisotropic_fit_without_orientation_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let run = simulated_run(tmp.path(), 6);
    let out = tmp.path().join("fit");
    let r = etas(&["fit", "--config", s(&run), "--out", s(&out), "--family", "VN-2:1"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
    let missing = tmp.path().join("nope.geojson");
    let r = etas(&["fit", "--config", s(&run), "--out", s(&out), "--family", "VN-2:1", "--boundary", s(&missing)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn forecast_and_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run = simulated_run(tmp.path(), 7);
    let fit_dir = tmp.path().join("fit");
    stdout_json(&etas(&["fit", "--config", s(&run), "--out", s(&fit_dir), "--family", "CS-1:1"]));
    let model = fit_dir.join("model.json");

    let fc = tmp.path().join("forecast");
    let summary = stdout_json(&etas(&["forecast", "--config", s(&run), "--out", s(&fc), "--model", s(&model)]));
    assert_eq!(summary["n_days"], 30);
    assert_eq!(summary["n_cells"], 100);
    let grid = std::fs::read_to_string(fc.join("forecast_grid.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "lon_mid,lat_mid,day_index,lambda");
    assert_eq!(grid.lines().count(), 1 + 30 * 100);

    // single model: one row, nothing to compare
    let ev1 = tmp.path().join("eval1");
    let report = stdout_json(&etas(&["evaluate", "--config", s(&run), "--out", s(&ev1), "--model", s(&model)]));
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 0);
    assert_eq!(std::fs::read_to_string(ev1.join("pauc.csv")).unwrap().lines().count(), 2);

    // identical copies: degenerate variance is reported, not fatal
    let copy = tmp.path().join("copy.json");
    std::fs::copy(&model, &copy).unwrap();
    let ev2 = tmp.path().join("eval2");
    let report = stdout_json(&etas(&[
        "evaluate", "--config", s(&run), "--out", s(&ev2), "--model", s(&model), "--model", s(&copy),
    ]));
    let cmp = &report["comparisons"][0];
    assert!(cmp["error"].as_str().unwrap().contains("degenerate"), "{report}");

    // generating intensity against a flat rate
    let truth = tmp.path().join("truth.json");
    write_json(&truth, &sim_config(7, 0.06));
    let flat = tmp.path().join("flat.json");
    write_json(&flat, &json!({"constant_rate": 0.06}));
    let ev3 = tmp.path().join("eval3");
    let report = stdout_json(&etas(&[
        "evaluate", "--config", s(&run), "--out", s(&ev3), "--model", s(&truth), "--model", s(&flat), "--baseline", "flat",
    ]));
    let pauc: Vec<f64> = report["pauc"].as_array().unwrap().iter().map(|r| r["pauc"].as_f64().unwrap()).collect();
    assert!(pauc[0] > pauc[1], "{pauc:?}");
    assert!(ev3.join("roc_truth.csv").exists() && ev3.join("roc_flat.csv").exists());
    assert!(report["comparisons"][0]["p_value"].is_number());

    // two fit runs both write model.json; they are told apart by family
    let fit_vn = tmp.path().join("fit_vn");
    stdout_json(&etas(&["fit", "--config", s(&run), "--out", s(&fit_vn), "--family", "VN-1:1"]));
    let ev4 = tmp.path().join("eval4");
    let report = stdout_json(&etas(&[
        "evaluate", "--config", s(&run), "--out", s(&ev4), "--model", s(&fit_vn.join("model.json")), "--model", s(&model),
    ]));
    assert_eq!(report["comparisons"][0]["model"], "VN-1-1", "{report}");
    assert_eq!(report["comparisons"][0]["baseline"], "CS-1-1", "{report}");
    assert!(ev4.join("roc_VN-1-1.csv").exists() && ev4.join("roc_CS-1-1.csv").exists());
}

#[test]
fn mismatched_domain_is_an_alignment_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = simulated_run(tmp.path(), 8);
    let other = tmp.path().join("other.json");
    let mut cfg = sim_config(8, 0.06);
    cfg["domain"] = json!({"lon_min": 0.0, "lon_max": 3.0, "lat_min": 0.0, "lat_max": 2.0});
    write_json(&other, &cfg);
    let out = tmp.path().join("eval");
    let r = etas(&["evaluate", "--config", s(&run), "--out", s(&out), "--model", s(&other)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not aligned"));
    assert!(!out.exists());
}

#[test]
fn comcat_input_and_boundary_orientation() {
    let tmp = tempfile::tempdir().unwrap();
    let boundary = tmp.path().join("boundary.geojson");
    write_json(
        &boundary,
        &json!({
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "properties": {"type": "subduction"},
                "geometry": {"type": "LineString", "coordinates": [[0.1, 0.1], [0.6, 0.6], [1.2, 1.2], [1.9, 1.9]]}
            }]
        }),
    );
    let theta = stdout_json(&etas(&["estimate-theta", "--boundary", s(&boundary), "--domain", "0,2,0,2"]));
    assert!((theta["all"]["theta_deg"].as_f64().unwrap() - 45.0).abs() < 1e-9);
    assert_eq!(theta["all"]["n_segments"], 3);

    let csv = tmp.path().join("comcat.csv");
    let mut text = String::from("time,latitude,longitude,depth,mag\n");
    for k in 0..60 {
        let day = 1 + k % 28;
        let month = 1 + (k * 7) % 12;
        let (lat, lon) = (0.1 + 0.03 * k as f64, 1.9 - 0.025 * k as f64);
        text.push_str(&format!("2001-{month:02}-{day:02}T{:02}:00:00.000Z,{lat},{lon},{},{}\n", k % 24, 10 + k, 3.0 + 0.05 * (k % 20) as f64));
    }
    text.push_str("2001-03-03T00:00:00Z,1.0,1.0,150,4.0\n");
    std::fs::write(&csv, text).unwrap();
    let run = tmp.path().join("run.json");
    write_json(
        &run,
        &json!({
            "catalog": "comcat.csv",
            "boundary": "boundary.geojson",
            "domain": {"lon_min": 0.0, "lon_max": 2.0, "lat_min": 0.0, "lat_max": 2.0},
            "window": {"start": "2001-01-01", "train_end": "2002-01-01", "forecast_end": "2002-01-01"},
            "subducting_only": false,
            "fit": {"max_iter": 10}
        }),
    );
    let out = tmp.path().join("fit");
    let report = stdout_json(&etas(&["fit", "--config", s(&run), "--out", s(&out), "--family", "CN-2:1"]));
    assert_eq!(report["n_events"], 60);
    assert!((report["theta_deg"].as_f64().unwrap() - 45.0).abs() < 1e-9);
    assert!(out.join("theta.json").exists());
}
