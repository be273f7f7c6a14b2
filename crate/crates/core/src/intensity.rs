//! Conditional intensity `lambda(x, y, t | H_t)` and its evaluation on
//! regular cell grids.

use std::io::Write;

use rayon::prelude::*;

use crate::catalog::{Domain, Event};
use crate::error::{EtasError, Result};
use crate::misd::FittedModel;

/// Components of a spatio-temporal Hawkes intensity
/// `mu(x, y) + sum_j k_j g_j(x - x_j, y - y_j, t - t_j)`.
pub trait HawkesComponents: Sync {
    /// Background rate per (degree^2 * day).
    fn background(&self, lon: f64, lat: f64) -> f64;
    /// Expected number of direct children of `parent`.
    fn productivity(&self, parent: &Event) -> f64;
    /// Normalized offspring density per (degree^2 * day).
    fn triggering(&self, parent: &Event, dx: f64, dy: f64, dt: f64) -> f64;
    /// Lags beyond this contribute exactly zero.
    fn max_lag_days(&self) -> f64 {
        f64::INFINITY
    }
}

impl HawkesComponents for FittedModel {
    fn background(&self, lon: f64, lat: f64) -> f64 {
        self.components.mu.eval(lon, lat)
    }

    fn productivity(&self, parent: &Event) -> f64 {
        self.components.productivity(parent)
    }

    fn triggering(&self, _parent: &Event, dx: f64, dy: f64, dt: f64) -> f64 {
        self.components.g.as_ref().map_or(0.0, |g| g.eval_g(dx, dy, dt))
    }

    fn max_lag_days(&self) -> f64 {
        self.components.g.as_ref().map_or(0.0, |g| g.max_dt())
    }
}

/// Spatially and temporally constant rate, no triggering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRate {
    pub rate: f64,
}

impl HawkesComponents for ConstantRate {
    fn background(&self, _lon: f64, _lat: f64) -> f64 {
        self.rate
    }

    fn productivity(&self, _parent: &Event) -> f64 {
        0.0
    }

    fn triggering(&self, _parent: &Event, _dx: f64, _dy: f64, _dt: f64) -> f64 {
        0.0
    }

    fn max_lag_days(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntensityQuery<'a> {
    pub lon: f64,
    pub lat: f64,
    pub t: f64,
    /// Events strictly before `t`, sorted by time.
    pub history: &'a [Event],
}

/// `lambda(x, y, t | H_t)`; every history event must precede `t`.
pub fn conditional_intensity<M: HawkesComponents + ?Sized>(model: &M, query: &IntensityQuery<'_>) -> Result<f64> {
    if let Some(i) = query.history.iter().position(|e| !(e.t < query.t)) {
        return Err(EtasError::Precondition(format!(
            "history event {i} at t = {} does not precede t = {}",
            query.history[i].t, query.t
        )));
    }
    let prepared = PreparedHistory::new(model, query.history);
    Ok(prepared.intensity(model, query.lon, query.lat, query.t))
}

/// History events with their productivities precomputed.
#[derive(Debug, Clone)]
pub struct PreparedHistory<'a> {
    events: &'a [Event],
    productivity: Vec<f64>,
}

impl<'a> PreparedHistory<'a> {
    /// `events` must be sorted by time.
    pub fn new<M: HawkesComponents + ?Sized>(model: &M, events: &'a [Event]) -> Self {
        let productivity = events.par_iter().map(|e| model.productivity(e)).collect();
        PreparedHistory { events, productivity }
    }

    pub fn events(&self) -> &'a [Event] {
        self.events
    }

    /// Intensity using only history events with `t_j < t`.
    pub fn intensity<M: HawkesComponents + ?Sized>(&self, model: &M, lon: f64, lat: f64, t: f64) -> f64 {
        let hi = self.events.partition_point(|e| e.t < t);
        let max_lag = model.max_lag_days();
        let lo = if max_lag.is_finite() {
            self.events[..hi].partition_point(|e| t - e.t > max_lag)
        } else {
            0
        };
        let mut lambda = model.background(lon, lat);
        for (e, k) in self.events[lo..hi].iter().zip(&self.productivity[lo..hi]) {
            if *k != 0.0 {
                lambda += k * model.triggering(e, lon - e.lon, lat - e.lat, t - e.t);
            }
        }
        lambda
    }
}

/// Regular cell grid over a rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGrid {
    pub domain: Domain,
    pub cell: f64,
    pub n_lon: usize,
    pub n_lat: usize,
}

impl CellGrid {
    /// The cell size must divide both domain extents.
    pub fn new(domain: Domain, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(EtasError::InvalidParameter(format!("cell size must be positive, got {cell}")));
        }
        let count = |extent: f64| -> Result<usize> {
            let r = extent / cell;
            let n = r.round();
            if (r - n).abs() > 1e-6 || n < 1.0 {
                return Err(EtasError::InvalidParameter(format!(
                    "cell size {cell} does not divide extent {extent}"
                )));
            }
            Ok(n as usize)
        };
        Ok(CellGrid {
            n_lon: count(domain.width())?,
            n_lat: count(domain.height())?,
            domain,
            cell,
        })
    }

    pub fn len(&self) -> usize {
        self.n_lon * self.n_lat
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Midpoint of cell `index` in row-major order (latitude outer).
    pub fn midpoint(&self, index: usize) -> (f64, f64) {
        let (row, col) = (index / self.n_lon, index % self.n_lon);
        (
            self.domain.lon_min + (col as f64 + 0.5) * self.cell,
            self.domain.lat_min + (row as f64 + 0.5) * self.cell,
        )
    }

    pub fn midpoints(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.midpoint(i)).collect()
    }

    /// Left-closed cells; points on the maximum edge go to the last cell.
    pub fn index_of(&self, lon: f64, lat: f64) -> Option<usize> {
        if !self.domain.contains(lon, lat) {
            return None;
        }
        let col = (((lon - self.domain.lon_min) / self.cell).floor() as usize).min(self.n_lon - 1);
        let row = (((lat - self.domain.lat_min) / self.cell).floor() as usize).min(self.n_lat - 1);
        Some(row * self.n_lon + col)
    }
}

/// Intensity at every cell midpoint at time `t`, using history strictly
/// before `t`.
pub fn intensity_grid<M: HawkesComponents + ?Sized>(
    model: &M,
    history: &PreparedHistory<'_>,
    t: f64,
    grid: &CellGrid,
) -> Vec<f64> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (lon, lat) = grid.midpoint(i);
            history.intensity(model, lon, lat, t)
        })
        .collect()
}

/// Appends rows `lon_mid,lat_mid,day_index,lambda`.
pub fn write_grid_rows<W: Write>(w: &mut csv::Writer<W>, grid: &CellGrid, day_index: usize, values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        let (lon, lat) = grid.midpoint(i);
        w.write_record([lon.to_string(), lat.to_string(), day_index.to_string(), v.to_string()])?;
    }
    Ok(())
}

pub const GRID_CSV_HEADER: [&str; 4] = ["lon_mid", "lat_mid", "day_index", "lambda"];

/// Purely temporal Hawkes intensity `mu + sum_{t_j < t} g(t - t_j)`.
pub fn temporal_intensity(mu: f64, kernel: impl Fn(f64) -> f64, history: &[f64], t: f64) -> f64 {
    mu + history.iter().filter(|&&s| s < t).map(|&s| kernel(t - s)).sum::<f64>()
}
