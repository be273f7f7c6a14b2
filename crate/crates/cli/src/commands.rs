use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::{json, Value};

use etas_core::catalog::{read_canonical_csv, write_canonical_csv, Domain};
use etas_core::forecast::{bootstrap_compare, partial_auc, score_forecast_period, ScoredCells};
use etas_core::geometry::estimate_theta;
use etas_core::intensity::{write_grid_rows, CellGrid, ConstantRate, HawkesComponents, GRID_CSV_HEADER};
use etas_core::misd::{fit, FittedModel};
use etas_core::registry::Registry;
use etas_core::simulate::{branching_ratio, simulate, ParametricEtas, SimConfig};
use etas_core::triggering::TriggeringShape;
use etas_core::EtasError;

use crate::config::{config_error, RunConfig};
use crate::outputs::{OutputSet, TOOL_VERSION};

fn grid_for(domain: Domain, cell: f64, what: &str) -> Result<CellGrid> {
    CellGrid::new(domain, cell).map_err(|e| config_error(format!("{what}: {e}")))
}

pub fn cmd_fit(mut run: RunConfig, dump_grids: bool) -> Result<Value> {
    let out_dir = run.output_dir()?.to_path_buf();
    let catalog = run.load_catalog()?;
    let training = catalog.training_catalog();
    if training.is_empty() {
        return Err(EtasError::EmptyCatalog.into());
    }

    let boundary = run.load_boundary()?;
    let eta = run.fit.family.eta;
    let mut theta_report = None;
    let theta_deg = match (run.theta_deg, &boundary) {
        (Some(t), _) => t,
        (None, Some(b)) => {
            let est = estimate_theta(b, run.subducting_only)?;
            let t = est.theta_deg;
            theta_report = Some(est);
            t
        }
        (None, None) if eta > 1.0 => {
            return Err(config_error(format!(
                "family {} is anisotropic but neither theta_deg nor a boundary file is given",
                run.fit.family
            )))
        }
        (None, None) => 0.0,
    };
    run.fit.theta_deg = theta_deg;

    let result = fit(&training, &run.fit, &Registry::builtin())?;
    let model = &result.model;
    let mut out = OutputSet::new(&out_dir)?;
    out.write_config_echo("fit", &run)?;
    if let Some(est) = &theta_report {
        out.write_json("theta.json", est)?;
    }
    let model_json = model.to_json()?;
    out.write("model.json", |w| Ok(w.write_all(model_json.as_bytes())?))?;
    out.write("catalog.csv", |w| Ok(write_canonical_csv(training.events(), w)?))?;
    out.write("trace.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["iteration", "max_change", "log_likelihood", "n_flagged"])?;
        for r in &model.trace {
            c.write_record([
                r.iteration.to_string(),
                r.max_change.to_string(),
                r.log_likelihood.map(|v| v.to_string()).unwrap_or_default(),
                r.flagged_events.len().to_string(),
            ])?;
        }
        Ok(c.flush()?)
    })?;

    let comps = &model.components;
    let mu_grid = grid_for(run.domain, run.grid.mu_grid_deg, "mu_grid_deg")?;
    out.write("mu_grid.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["lon_mid", "lat_mid", "mu"])?;
        for (lon, lat) in mu_grid.midpoints() {
            c.write_record([lon.to_string(), lat.to_string(), comps.mu.eval(lon, lat).to_string()])?;
        }
        Ok(c.flush()?)
    })?;

    let alpha_grid = grid_for(run.domain, run.grid.alpha_cell_deg, "alpha_cell_deg")?;
    let sub = run.grid.alpha_subsamples.max(1);
    out.write("alpha_cells.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["lon_mid", "lat_mid", "alpha", "n_defined"])?;
        for (lon, lat) in alpha_grid.midpoints() {
            let half = 0.5 * alpha_grid.cell;
            let (mut sum, mut n) = (0.0, 0usize);
            for a in 0..sub {
                for b in 0..sub {
                    let x = lon - half + (a as f64 + 0.5) * alpha_grid.cell / sub as f64;
                    let y = lat - half + (b as f64 + 0.5) * alpha_grid.cell / sub as f64;
                    if let Some(v) = model.alpha(x, y) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            let mean = if n > 0 { (sum / n as f64).to_string() } else { String::new() };
            c.write_record([lon.to_string(), lat.to_string(), mean, n.to_string()])?;
        }
        Ok(c.flush()?)
    })?;

    let mags: Vec<f64> = training.events().iter().map(|e| e.mag).collect();
    let (m_lo, m_hi) = mags
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), m| (a.min(*m), b.max(*m)));
    let points = run.grid.kappa_points.max(2);
    out.write("kappa_curve.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["mag", "kappa"])?;
        for k in 0..points {
            let m = if m_hi > m_lo {
                m_lo + (m_hi - m_lo) * k as f64 / (points - 1) as f64
            } else {
                m_lo
            };
            c.write_record([m.to_string(), comps.kappa.eval(m).to_string()])?;
        }
        Ok(c.flush()?)
    })?;

    if let Some(g) = &comps.g {
        out.write("g0_lattice.csv", |w| Ok(g.write_lattice_csv(w, run.grid.g0_lattice_nodes, 1e-3)?))?;
        if dump_grids {
            match &g.shape {
                TriggeringShape::NonSeparable { grid } => {
                    out.write("triggering_grid.csv", |w| Ok(grid.write_csv(w)?))?;
                }
                TriggeringShape::Separable { space, time } => {
                    for (name, d) in [("triggering_space.csv", space), ("triggering_time.csv", time)] {
                        out.write(name, |w| {
                            let mut c = csv::Writer::from_writer(w);
                            c.write_record(["x", "value"])?;
                            for (k, v) in d.values.iter().enumerate() {
                                c.write_record([d.axis.node(k).to_string(), v.to_string()])?;
                            }
                            Ok(c.flush()?)
                        })?;
                    }
                }
            }
        }
    }

    let report = json!({
        "tool": TOOL_VERSION,
        "family": model.family.to_string(),
        "varying_alpha": model.family.varying_alpha(),
        "separable": model.family.separable(),
        "eta": model.anisotropy.eta(),
        "theta_deg": theta_deg,
        "n_events": model.n_events,
        "converged": model.converged,
        "iterations": model.iterations,
        "mainshock_fraction": model.mainshock_fraction,
        "a_star": model.a_star,
        "min_magnitude": training.min_magnitude,
        "final_log_likelihood": model.trace.last().and_then(|t| t.log_likelihood),
    });
    out.write_json("report.json", &report)?;

    let back = FittedModel::from_json(&std::fs::read_to_string(out.path("model.json"))?)
        .context("validating model.json")?;
    if back.n_events != model.n_events {
        bail!("model.json does not round-trip");
    }
    out.commit()?;
    Ok(report)
}

pub fn cmd_simulate(cfg: SimConfig, out_dir: &Path) -> Result<Value> {
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let sim = simulate(&cfg)?;
    let mut out = OutputSet::new(out_dir)?;
    out.write_config_echo("simulate", &cfg)?;
    out.write("catalog.csv", |w| Ok(write_canonical_csv(sim.catalog.events(), w)?))?;
    out.write("labels.csv", |w| Ok(sim.write_labels_csv(w)?))?;
    let summary = json!({
        "tool": TOOL_VERSION,
        "n_events": sim.len(),
        "mainshock_fraction": if sim.is_empty() { None } else { Some(sim.background_fraction()) },
        "branching_ratio": branching_ratio(&cfg)?,
        "expected_background": cfg.expected_background(),
        "children_drawn": sim.children_drawn,
        "truncated": sim.truncated,
        "seed": cfg.seed,
    });
    out.write_json("summary.json", &summary)?;

    let file = std::fs::File::open(out.path("catalog.csv"))?;
    let back = read_canonical_csv(file, cfg.domain, cfg.t_len_days, 0.0);
    match back {
        Ok(c) if c.len() == sim.len() => {}
        Err(EtasError::EmptyCatalog) if sim.is_empty() => {}
        Ok(_) => bail!("catalog.csv does not round-trip"),
        Err(e) => return Err(e).context("validating catalog.csv"),
    }
    out.commit()?;
    Ok(summary)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantSpec {
    constant_rate: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModelFile {
    Fitted(Box<FittedModel>),
    Truth(Box<SimConfig>),
    Constant(ConstantSpec),
}

/// A model to score: a fitted model, a simulator configuration (its
/// generating intensity) or a constant rate.
pub enum LoadedModel {
    Fitted(Box<FittedModel>),
    Truth(Box<ParametricEtas>),
    Constant(ConstantRate),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|_| {
            config_error(format!(
                "{} is neither a fitted model, a simulation config nor {{\"constant_rate\": ...}}",
                path.display()
            ))
        })?;
        Ok(match file {
            ModelFile::Fitted(m) => LoadedModel::Fitted(m),
            ModelFile::Truth(c) => LoadedModel::Truth(Box::new(ParametricEtas::new(*c)?)),
            ModelFile::Constant(c) => LoadedModel::Constant(ConstantRate { rate: c.constant_rate }),
        })
    }

    pub fn label(&self) -> String {
        match self {
            LoadedModel::Fitted(m) => m.family.to_string(),
            LoadedModel::Truth(_) => "truth".into(),
            LoadedModel::Constant(_) => "constant".into(),
        }
    }

    pub fn components(&self) -> &dyn HawkesComponents {
        match self {
            LoadedModel::Fitted(m) => m.as_ref(),
            LoadedModel::Truth(t) => t.as_ref(),
            LoadedModel::Constant(c) => c,
        }
    }

    fn domain(&self) -> Option<Domain> {
        match self {
            LoadedModel::Fitted(m) => Some(m.domain),
            LoadedModel::Truth(t) => Some(t.config.domain),
            LoadedModel::Constant(_) => None,
        }
    }
}

struct ForecastSetup {
    grid: CellGrid,
    start: f64,
    n_days: usize,
    catalog: etas_core::catalog::Catalog,
}

fn forecast_setup(run: &RunConfig) -> Result<ForecastSetup> {
    let catalog = run.load_catalog()?;
    let n_days = catalog.forecast_len_days.floor() as usize;
    if n_days == 0 {
        return Err(config_error("forecast window is shorter than one day"));
    }
    Ok(ForecastSetup {
        grid: grid_for(run.domain, run.grid.forecast_cell_deg, "forecast_cell_deg")?,
        start: catalog.train_len_days,
        n_days,
        catalog,
    })
}

fn check_alignment(model: &LoadedModel, name: &str, run: &RunConfig) -> Result<()> {
    if let Some(d) = model.domain() {
        if d != run.domain {
            return Err(EtasError::Alignment(format!(
                "model {name} was built on domain {d:?}, the forecast grid covers {:?}",
                run.domain
            ))
            .into());
        }
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
}

fn model_name(path: &Path, taken: &[String]) -> String {
    unique_name(file_stem(path), taken)
}

fn unique_name(stem: String, taken: &[String]) -> String {
    let mut name = stem.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{stem}_{k}");
        k += 1;
    }
    name
}

pub fn cmd_forecast(run: RunConfig, model_path: &Path) -> Result<Value> {
    let out_dir = run.output_dir()?.to_path_buf();
    let model = LoadedModel::load(model_path)?;
    check_alignment(&model, &model_name(model_path, &[]), &run)?;
    let setup = forecast_setup(&run)?;
    let scored = score_forecast_period(
        model.components(),
        setup.catalog.events(),
        &setup.grid,
        setup.start,
        setup.n_days,
    )?;
    let mut out = OutputSet::new(&out_dir)?;
    out.write_config_echo("forecast", &json!({ "run": run, "model": model_path }))?;
    out.write("forecast_grid.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(GRID_CSV_HEADER)?;
        for (day, values) in scored.scores.chunks(scored.n_cells).enumerate() {
            write_grid_rows(&mut c, &setup.grid, day, values)?;
        }
        Ok(c.flush()?)
    })?;
    out.write("labels.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["day_index", "cell_index", "lon_mid", "lat_mid"])?;
        for (k, _) in scored.labels.iter().enumerate().filter(|(_, l)| **l) {
            let (day, cell) = (k / scored.n_cells, k % scored.n_cells);
            let (lon, lat) = setup.grid.midpoint(cell);
            c.write_record([day.to_string(), cell.to_string(), lon.to_string(), lat.to_string()])?;
        }
        Ok(c.flush()?)
    })?;
    let summary = json!({
        "tool": TOOL_VERSION,
        "model": model.label(),
        "n_days": setup.n_days,
        "n_cells": setup.grid.len(),
        "positive_cells": scored.positives(),
    });
    out.write_json("summary.json", &summary)?;
    out.commit()?;
    Ok(summary)
}

pub fn cmd_evaluate(run: RunConfig, model_paths: &[PathBuf]) -> Result<Value> {
    if model_paths.is_empty() {
        return Err(config_error("evaluate needs at least one --model"));
    }
    let out_dir = run.output_dir()?.to_path_buf();
    let models = model_paths.iter().map(|p| LoadedModel::load(p)).collect::<Result<Vec<_>>>()?;
    // Fit runs all write `model.json`; name by family when the stems collide.
    let stems: Vec<String> = model_paths.iter().map(|p| file_stem(p)).collect();
    let by_label = (1..stems.len()).any(|k| stems[..k].contains(&stems[k]));
    let mut names: Vec<String> = Vec::new();
    for (stem, m) in stems.into_iter().zip(&models) {
        let base = if by_label { m.label().replace(':', "-") } else { stem };
        let name = unique_name(base, &names);
        check_alignment(m, &name, &run)?;
        names.push(name);
    }
    let setup = forecast_setup(&run)?;
    let mut scored: Vec<ScoredCells> = Vec::new();
    for m in &models {
        scored.push(score_forecast_period(
            m.components(),
            setup.catalog.events(),
            &setup.grid,
            setup.start,
            setup.n_days,
        )?);
    }
    let rocs = scored.iter().map(partial_auc).collect::<etas_core::Result<Vec<_>>>()?;

    let eval = &run.evaluation;
    let baseline = names
        .iter()
        .zip(&models)
        .position(|(n, m)| *n == eval.baseline || m.label() == eval.baseline);
    let mut comparisons = Vec::new();
    if let Some(b) = baseline {
        for a in (0..models.len()).filter(|&a| a != b) {
            let entry = match bootstrap_compare(&scored[a], &scored[b], eval.n_boot, eval.seed) {
                Ok(r) => json!({
                    "model": names[a],
                    "baseline": names[b],
                    "pauc_model": r.pauc_a,
                    "pauc_baseline": r.pauc_b,
                    "difference": r.difference,
                    "sd": r.sd,
                    "z": finite_or_label(r.z),
                    "p_value": r.p_value,
                }),
                Err(EtasError::DegenerateVariance) => json!({
                    "model": names[a],
                    "baseline": names[b],
                    "error": "degenerate variance: the two forecasts agree on every bootstrap resample",
                }),
                Err(e) => return Err(e.into()),
            };
            comparisons.push(entry);
        }
    }

    let mut out = OutputSet::new(&out_dir)?;
    out.write_config_echo("evaluate", &json!({ "run": run, "models": model_paths }))?;
    out.write("pauc.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["model", "label", "pauc", "full_auc", "n_pos", "n_neg"])?;
        for ((n, m), r) in names.iter().zip(&models).zip(&rocs) {
            c.write_record([
                n.clone(),
                m.label(),
                r.pauc.to_string(),
                r.full_auc.to_string(),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
            ])?;
        }
        Ok(c.flush()?)
    })?;
    for (n, r) in names.iter().zip(&rocs) {
        out.write(&format!("roc_{n}.csv"), |w| Ok(r.write_csv(w)?))?;
    }
    let report = json!({
        "tool": TOOL_VERSION,
        "baseline": baseline.map(|b| names[b].clone()),
        "baseline_key": eval.baseline,
        "n_boot": eval.n_boot,
        "seed": eval.seed,
        "n_days": setup.n_days,
        "n_cells": setup.grid.len(),
        "pauc": names.iter().zip(&rocs).map(|(n, r)| json!({"model": n, "pauc": r.pauc})).collect::<Vec<_>>(),
        "comparisons": comparisons,
    });
    out.write_json("comparison.json", &report)?;
    out.commit()?;
    Ok(report)
}

fn finite_or_label(z: f64) -> Value {
    if z.is_finite() {
        json!(z)
    } else if z > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn cmd_estimate_theta(boundary: &Path, domain: Domain) -> Result<Value> {
    if !boundary.exists() {
        return Err(config_error(format!("boundary file {} does not exist", boundary.display())));
    }
    let polyline = etas_core::catalog::parse_boundary_geojson(boundary, &domain)?;
    let one = |subducting_only: bool| match estimate_theta(&polyline, subducting_only) {
        Ok(est) => json!({
            "theta_deg": est.theta_deg,
            "theta_rad": est.theta_rad,
            "method": est.method,
            "slope": est.slope,
            "r_squared": est.r_squared,
            "n_segments": est.n_segments,
            "weights": est.weights,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let subducting = one(true);
    let all = one(false);
    if subducting.get("error").is_some() && all.get("error").is_some() {
        bail!("no orientation could be estimated: {}", all["error"]);
    }
    Ok(json!({
        "tool": TOOL_VERSION,
        "domain": domain,
        "boundary": boundary,
        "subducting": subducting,
        "all": all,
    }))
}
