//! Run configuration: one JSON document, with `--set key.path=value` and
//! named flags applied on top before deserializing.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use etas_core::catalog::{
    parse_boundary_geojson, parse_catalog_csv, read_canonical_csv, BoundaryPolyline, Catalog, CatalogFilter, Domain,
    TimeWindow,
};
use etas_core::misd::FitConfig;

/// Error in the configuration or command line; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogFormat {
    /// ComCat export: time, latitude, longitude, depth, mag.
    #[default]
    Comcat,
    /// `lon,lat,t_days,mag` as written by `simulate` and `fit`.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub start: String,
    pub train_end: String,
    pub forecast_end: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Forecast cell size in degrees.
    pub forecast_cell_deg: f64,
    /// Spacing of the background-rate dump.
    pub mu_grid_deg: f64,
    /// Cell size over which the productivity correction is averaged.
    pub alpha_cell_deg: f64,
    /// Sub-samples per cell side when averaging the correction.
    pub alpha_subsamples: usize,
    /// Nodes per axis of the triggering lattice dump.
    pub g0_lattice_nodes: usize,
    pub kappa_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            forecast_cell_deg: 0.1,
            mu_grid_deg: 0.05,
            alpha_cell_deg: 0.2,
            alpha_subsamples: 4,
            g0_lattice_nodes: 64,
            kappa_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub n_boot: usize,
    pub seed: u64,
    /// Model label (family string or file stem) tested against.
    pub baseline: String,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_boot: 2000,
            seed: 1,
            baseline: "CS-1:1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub catalog_format: CatalogFormat,
    #[serde(default)]
    pub boundary: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub domain: Domain,
    /// Calendar window for ComCat input.
    #[serde(default)]
    pub window: Option<WindowSpec>,
    /// Window lengths for canonical input.
    #[serde(default)]
    pub train_len_days: Option<f64>,
    #[serde(default)]
    pub forecast_len_days: Option<f64>,
    #[serde(default = "default_depth")]
    pub depth_cutoff_km: f64,
    #[serde(default)]
    pub min_magnitude: Option<f64>,
    #[serde(default = "yes")]
    pub subducting_only: bool,
    /// Fixes the anisotropy orientation instead of estimating it from the
    /// boundary.
    #[serde(default)]
    pub theta_deg: Option<f64>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
}

fn default_depth() -> f64 {
    100.0
}

fn yes() -> bool {
    true
}

/// Reads a JSON file, applies overrides and resolves relative paths against
/// the file's directory.
pub fn load_value(path: Option<&Path>, overrides: &[String]) -> Result<(Value, PathBuf)> {
    let (mut value, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| config_error(format!("config {} is not valid JSON: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (v, base)
        }
        None => (Value::Object(Default::default()), PathBuf::new()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    Ok((value, base))
}

/// `a.b.c=value`; the value is parsed as JSON and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, key, parsed)
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_error(format!("empty segment in key `{key}`")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if k + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_value(value: Value, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| config_error(format!("invalid run config: {e}")))?;
        for p in [&mut cfg.catalog, &mut cfg.boundary, &mut cfg.output_dir].into_iter().flatten() {
            *p = resolve(base, p);
        }
        cfg.fit.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| config_error("no output directory (set output_dir or pass --out)"))
    }

    /// Full catalog (training and forecast windows).
    pub fn load_catalog(&self) -> Result<Catalog> {
        let path = self
            .catalog
            .as_ref()
            .ok_or_else(|| config_error("no catalog path (set catalog or pass --catalog)"))?;
        match self.catalog_format {
            CatalogFormat::Comcat => {
                let w = self
                    .window
                    .as_ref()
                    .ok_or_else(|| config_error("ComCat input needs `window` {start, train_end, forecast_end}"))?;
                let window = TimeWindow::parse(&w.start, &w.train_end, &w.forecast_end)
                    .map_err(|e| config_error(e.to_string()))?;
                let filter = CatalogFilter {
                    domain: self.domain,
                    depth_cutoff_km: self.depth_cutoff_km,
                    window,
                    min_magnitude: self.min_magnitude,
                };
                Ok(parse_catalog_csv(path, &filter)?)
            }
            CatalogFormat::Canonical => {
                let train = self
                    .train_len_days
                    .ok_or_else(|| config_error("canonical input needs `train_len_days`"))?;
                let forecast = self.forecast_len_days.unwrap_or(0.0);
                let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let mut cat = read_canonical_csv(file, self.domain, train, forecast)?;
                if let Some(m) = self.min_magnitude {
                    let kept = cat.events().iter().copied().filter(|e| e.mag >= m).collect();
                    cat = Catalog::new(kept, self.domain, train, forecast)?;
                    cat.min_magnitude = Some(m);
                }
                Ok(cat)
            }
        }
    }

    pub fn load_boundary(&self) -> Result<Option<BoundaryPolyline>> {
        match &self.boundary {
            None => Ok(None),
            Some(p) => {
                if !p.exists() {
                    return Err(config_error(format!("boundary file {} does not exist", p.display())));
                }
                Ok(Some(parse_boundary_geojson(p, &self.domain)?))
            }
        }
    }
}
