//! `etas`: fit, simulate, forecast and evaluate flexible nonparametric ETAS
//! models.

mod commands;
mod config;
mod outputs;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use etas_core::catalog::Domain;
use etas_core::simulate::SimConfig;
use etas_core::EtasError;

use config::{config_error, load_value, set_path, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "etas", version, about = "Flexible nonparametric ETAS models fitted by stochastic declustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to the training window and dump its components.
    Fit(FitArgs),
    /// Simulate a labeled catalog from a parametric ETAS configuration.
    Simulate(SimulateArgs),
    /// Daily intensity grids over the forecast window for one model.
    Forecast(ForecastArgs),
    /// Partial AUC of several models and bootstrap tests against a baseline.
    Evaluate(EvaluateArgs),
    /// Boundary orientation from a plate-boundary GeoJSON file.
    EstimateTheta(ThetaArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fit.max_iter=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Catalog file.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Plate-boundary GeoJSON used to estimate theta.
    #[arg(long)]
    boundary: Option<PathBuf>,
    /// Model family such as `VN-2:1` or `CS-1:1`.
    #[arg(long)]
    family: Option<String>,
    /// Anisotropy orientation in degrees; skips boundary estimation.
    #[arg(long)]
    theta_deg: Option<f64>,
    /// Also write the fitted triggering grid.
    #[arg(long)]
    dump_grids: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fitted model JSON, simulation config or `{"constant_rate": r}`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model files; repeat for each model.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Model label or file stem to test against (default `CS-1:1`).
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ThetaArgs {
    #[arg(long)]
    boundary: PathBuf,
    /// `lon_min,lon_max,lat_min,lat_max`; taken from `--config` if omitted.
    #[arg(long, allow_hyphen_values = true)]
    domain: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the result to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn absolute(p: &Path) -> Result<Value> {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    };
    Ok(Value::String(abs.to_string_lossy().into_owned()))
}

fn load_run(args: &RunArgs, extra: Vec<(&str, Value)>) -> Result<RunConfig> {
    let (mut value, base) = load_value(args.config.as_deref(), &args.overrides)?;
    if let Some(p) = &args.out {
        set_path(&mut value, "output_dir", absolute(p)?)?;
    }
    if let Some(p) = &args.catalog {
        set_path(&mut value, "catalog", absolute(p)?)?;
    }
    for (k, v) in extra {
        set_path(&mut value, k, v)?;
    }
    RunConfig::from_value(value, &base)
}

fn parse_domain(s: &str) -> Result<Domain> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_error(format!("domain `{s}` is not four comma-separated numbers")))?;
    if v.len() != 4 {
        return Err(config_error(format!("domain `{s}` needs exactly four numbers")));
    }
    Domain::new(v[0], v[1], v[2], v[3]).map_err(|e| config_error(e.to_string()))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ETAS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| config_error(format!("ETAS_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<Value> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => {
            let mut extra = Vec::new();
            if let Some(b) = &a.boundary {
                extra.push(("boundary", absolute(b)?));
            }
            if let Some(f) = &a.family {
                extra.push(("fit.family", json!(f)));
            }
            if let Some(t) = a.theta_deg {
                extra.push(("theta_deg", json!(t)));
            }
            commands::cmd_fit(load_run(&a.run, extra)?, a.dump_grids)
        }
        Command::Simulate(a) => {
            let (mut value, _) = load_value(Some(&a.config), &a.overrides)?;
            if let Some(s) = a.seed {
                set_path(&mut value, "seed", json!(s))?;
            }
            let cfg: SimConfig = serde_json::from_value(value)
                .map_err(|e| config_error(format!("invalid simulation config: {e}")))?;
            commands::cmd_simulate(cfg, &a.out)
        }
        Command::Forecast(a) => commands::cmd_forecast(load_run(&a.run, Vec::new())?, &a.model),
        Command::Evaluate(a) => {
            let mut extra = Vec::new();
            if let Some(b) = &a.baseline {
                extra.push(("evaluation.baseline", json!(b)));
            }
            if let Some(n) = a.n_boot {
                extra.push(("evaluation.n_boot", json!(n)));
            }
            if let Some(s) = a.seed {
                extra.push(("evaluation.seed", json!(s)));
            }
            commands::cmd_evaluate(load_run(&a.run, extra)?, &a.models)
        }
        Command::EstimateTheta(a) => {
            let domain = match (&a.domain, &a.config) {
                (Some(d), _) => parse_domain(d)?,
                (None, Some(c)) => {
                    let (value, _) = load_value(Some(c), &[])?;
                    serde_json::from_value(value.get("domain").cloned().unwrap_or(Value::Null))
                        .map_err(|e| config_error(format!("config has no valid domain: {e}")))?
                }
                (None, None) => return Err(config_error("estimate-theta needs --domain or --config")),
            };
            let result = commands::cmd_estimate_theta(&a.boundary, domain)?;
            if let Some(p) = &a.out {
                let text = serde_json::to_string_pretty(&result)? + "\n";
                std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(result)
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<EtasError>(), Some(EtasError::Config(_)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            // a closed stdout (e.g. piped into `head`) is not a failure of the run
            let _ = writeln!(
                std::io::stdout().lock(),
                "{}",
                serde_json::to_string_pretty(&summary).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
