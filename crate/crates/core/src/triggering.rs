//! Nonparametric triggering density.
//!
//! Pairwise lags `(ds, dt)` are log-transformed and standardized,
//! `ds* = ln(ds + 1) / sigma_s`, `dt* = ln(dt + 1) / sigma_t`, and a weighted
//! binned Gaussian KDE is fitted in the transformed plane. The radial-temporal
//! density in original units is recovered with the Jacobian
//! `g0(ds, dt) = g0*(ds*, dt*) / (sigma_s sigma_t (ds + 1)(dt + 1))`, and the
//! spatio-temporal density is `g(dx, dy, dt) = g0(d_M, dt) / (2 pi d_M)` with
//! `d_M` the Mahalanobis lag.
//!
//! The transformed grid starts at `ds* = 0`, `dt* = 0`, so the estimate is
//! renormalized onto admissible lags rather than leaking mass below zero.

use std::f64::consts::PI;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Domain, Event};
use crate::error::{EtasError, Result};
use crate::geometry::{AnisotropyParams, Metric};
use crate::kernels::{
    binned_kde_1d_with_mass, binned_kde_2d_with_mass, GridAxis, GridDensity1D, GridDensity2D,
};

/// Floor for strictly positive time lags, in days.
pub const DEFAULT_EPS_T: f64 = 1e-4;
/// Floor for the spatial lag in the `1 / (2 pi d_M)` factor, in degrees.
pub const DEFAULT_EPS_S: f64 = 1e-4;

/// Options for lag-table construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagOptions {
    /// Pairs with `t_i - t_j > max_dt` are excluded. `None` keeps every pair.
    pub max_dt: Option<f64>,
    pub eps_t: f64,
}

impl Default for LagOptions {
    fn default() -> Self {
        LagOptions {
            max_dt: None,
            eps_t: DEFAULT_EPS_T,
        }
    }
}

/// All admissible (parent j, child i) pairs with `t_j < t_i`.
///
/// For each child the admissible parents form a contiguous index range of the
/// time-sorted catalog: equal-time events never trigger each other, and
/// parents older than `max_dt` are dropped.
#[derive(Debug, Clone)]
pub struct LagTable {
    n: usize,
    parents: Vec<Range<usize>>,
    offsets: Vec<usize>,
    ds: Vec<f64>,
    dt: Vec<f64>,
    s_star: Vec<f64>,
    t_star: Vec<f64>,
    sigma_s: f64,
    sigma_t: f64,
    anisotropy: AnisotropyParams,
    options: LagOptions,
}

impl LagTable {
    pub fn build(events: &[Event], anisotropy: AnisotropyParams, options: LagOptions) -> Result<Self> {
        let n = events.len();
        if n < 2 {
            return Err(EtasError::InsufficientData(format!(
                "lag table needs at least 2 events, got {n}"
            )));
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(EtasError::Precondition("events must be sorted by time".into()));
        }
        let parents = admissible_parents(events, options.max_dt);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut total = 0;
        for r in &parents {
            offsets.push(total);
            total += r.len();
        }
        offsets.push(total);
        if total == 0 {
            return Err(EtasError::InsufficientData(
                "no event has an admissible earlier event".into(),
            ));
        }

        let metric = anisotropy.metric();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let child = &events[i];
                parents[i]
                    .clone()
                    .map(|j| {
                        let parent = &events[j];
                        let ds = metric.lag(child.lon - parent.lon, child.lat - parent.lat);
                        let dt = (child.t - parent.t).max(options.eps_t);
                        (ds, dt)
                    })
                    .unzip()
            })
            .collect();
        let mut ds = Vec::with_capacity(total);
        let mut dt = Vec::with_capacity(total);
        for (rs, rt) in rows {
            ds.extend(rs);
            dt.extend(rt);
        }

        let (sigma_s, sigma_t) = if total == 1 {
            // a single lag carries no spread; standardization is the identity
            (1.0, 1.0)
        } else {
            let ss = std_dev(ds.iter().map(|d| d.ln_1p()));
            let st = std_dev(dt.iter().map(|d| d.ln_1p()));
            if !(ss > 0.0) || !(st > 0.0) {
                return Err(EtasError::Degenerate(
                    "all spatial or temporal lags are identical".into(),
                ));
            }
            (ss, st)
        };

        let s_star = ds.iter().map(|d| d.ln_1p() / sigma_s).collect();
        let t_star = dt.iter().map(|d| d.ln_1p() / sigma_t).collect();
        Ok(LagTable {
            n,
            parents,
            offsets,
            ds,
            dt,
            s_star,
            t_star,
            sigma_s,
            sigma_t,
            anisotropy,
            options,
        })
    }

    pub fn n_events(&self) -> usize {
        self.n
    }

    pub fn n_pairs(&self) -> usize {
        self.ds.len()
    }

    pub fn sigma_s(&self) -> f64 {
        self.sigma_s
    }

    pub fn sigma_t(&self) -> f64 {
        self.sigma_t
    }

    pub fn anisotropy(&self) -> AnisotropyParams {
        self.anisotropy
    }

    pub fn options(&self) -> LagOptions {
        self.options
    }

    /// Admissible parents of event `i`.
    pub fn parents(&self, i: usize) -> Range<usize> {
        self.parents[i].clone()
    }

    /// Range of flat pair indices belonging to child `i`.
    pub fn pair_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn ds(&self) -> &[f64] {
        &self.ds
    }

    pub fn dt(&self) -> &[f64] {
        &self.dt
    }

    /// Standardized log lags of flat pair `k`.
    #[inline]
    pub fn star(&self, k: usize) -> (f64, f64) {
        (self.s_star[k], self.t_star[k])
    }

    /// `(child, parent)` for every flat pair index, in storage order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.parents[i].clone().map(move |j| (i, j)))
    }

    fn star_extent(&self) -> (f64, f64) {
        let s = self.s_star.iter().fold(0.0f64, |m, v| m.max(*v));
        let t = self.t_star.iter().fold(0.0f64, |m, v| m.max(*v));
        (s, t)
    }
}

/// Contiguous parent ranges: parents of `i` are `j` with
/// `t_i - max_dt <= t_j < t_i`.
pub fn admissible_parents(events: &[Event], max_dt: Option<f64>) -> Vec<Range<usize>> {
    events
        .iter()
        .map(|e| {
            let hi = events.partition_point(|p| p.t < e.t);
            let lo = match max_dt {
                Some(w) => events.partition_point(|p| p.t < e.t - w),
                None => 0,
            };
            lo.min(hi)..hi
        })
        .collect()
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    if n < 2.0 {
        0.0
    } else {
        (m2 / (n - 1.0)).sqrt()
    }
}

/// Bandwidths and grid resolution for triggering-density estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggeringConfig {
    /// Joint bandwidth in standardized log-lag units.
    pub bandwidth: f64,
    /// Per-axis bandwidths `(space, time)` for the separable variant.
    pub separable_bandwidths: (f64, f64),
    pub grid_nodes: usize,
    /// Grid extends this many bandwidths past the largest transformed lag.
    pub margin_bandwidths: f64,
    pub eps_s: f64,
}

impl Default for TriggeringConfig {
    fn default() -> Self {
        TriggeringConfig {
            bandwidth: 0.2,
            separable_bandwidths: (0.2, 0.2),
            grid_nodes: 256,
            margin_bandwidths: 4.0,
            eps_s: DEFAULT_EPS_S,
        }
    }
}

/// Shape of the fitted transformed-space density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggeringShape {
    NonSeparable { grid: GridDensity2D },
    Separable { space: GridDensity1D, time: GridDensity1D },
}

#[derive(Serialize, Deserialize)]
struct TriggeringDensityRepr {
    shape: TriggeringShape,
    sigma_s: f64,
    sigma_t: f64,
    anisotropy: AnisotropyParams,
    eps_s: f64,
    captured_mass: f64,
}

/// Fitted triggering density, evaluable in transformed and original units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TriggeringDensityRepr", into = "TriggeringDensityRepr")]
pub struct TriggeringDensity {
    pub shape: TriggeringShape,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub anisotropy: AnisotropyParams,
    pub eps_s: f64,
    /// Fraction of kernel mass that fell on the grid before normalization.
    pub captured_mass: f64,
    metric: Metric,
}

impl From<TriggeringDensityRepr> for TriggeringDensity {
    fn from(r: TriggeringDensityRepr) -> Self {
        TriggeringDensity {
            metric: r.anisotropy.metric(),
            shape: r.shape,
            sigma_s: r.sigma_s,
            sigma_t: r.sigma_t,
            anisotropy: r.anisotropy,
            eps_s: r.eps_s,
            captured_mass: r.captured_mass,
        }
    }
}

impl From<TriggeringDensity> for TriggeringDensityRepr {
    fn from(d: TriggeringDensity) -> Self {
        TriggeringDensityRepr {
            shape: d.shape,
            sigma_s: d.sigma_s,
            sigma_t: d.sigma_t,
            anisotropy: d.anisotropy,
            eps_s: d.eps_s,
            captured_mass: d.captured_mass,
        }
    }
}

impl PartialEq for TriggeringDensity {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.sigma_s == other.sigma_s
            && self.sigma_t == other.sigma_t
            && self.anisotropy == other.anisotropy
            && self.eps_s == other.eps_s
            && self.captured_mass == other.captured_mass
    }
}

fn transformed_axes(lags: &LagTable, cfg: &TriggeringConfig, hs: f64, ht: f64) -> Result<(GridAxis, GridAxis)> {
    if cfg.grid_nodes < 2 {
        return Err(EtasError::InvalidParameter("grid needs at least 2 nodes".into()));
    }
    let (smax, tmax) = lags.star_extent();
    let s_axis = GridAxis::new(0.0, smax + cfg.margin_bandwidths * hs, cfg.grid_nodes)?;
    let t_axis = GridAxis::new(0.0, tmax + cfg.margin_bandwidths * ht, cfg.grid_nodes)?;
    Ok((s_axis, t_axis))
}

fn check_weights(lags: &LagTable, weights: &[f64]) -> Result<()> {
    if weights.len() != lags.n_pairs() {
        return Err(EtasError::InvalidParameter(format!(
            "{} weights for {} pairs",
            weights.len(),
            lags.n_pairs()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(EtasError::InvalidParameter("weights must be non-negative".into()));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(EtasError::Degenerate("all triggering weights are zero".into()));
    }
    Ok(())
}

/// Weighted binned KDE of the transformed lag pairs with bandwidth `h4`.
pub fn fit_nonseparable(lags: &LagTable, weights: &[f64], cfg: &TriggeringConfig) -> Result<TriggeringDensity> {
    check_weights(lags, weights)?;
    let h = cfg.bandwidth;
    let (s_axis, t_axis) = transformed_axes(lags, cfg, h, h)?;
    let points: Vec<(f64, f64)> = (0..lags.n_pairs()).map(|k| lags.star(k)).collect();
    let (grid, captured) = binned_kde_2d_with_mass(&points, weights, s_axis, t_axis, h)?;
    Ok(TriggeringDensity::new(
        TriggeringShape::NonSeparable { grid },
        lags,
        cfg.eps_s,
        captured,
    ))
}

/// Independent 1-D binned KDEs of the transformed spatial and temporal lags.
pub fn fit_separable(lags: &LagTable, weights: &[f64], cfg: &TriggeringConfig) -> Result<TriggeringDensity> {
    check_weights(lags, weights)?;
    let (hs, ht) = cfg.separable_bandwidths;
    let (s_axis, t_axis) = transformed_axes(lags, cfg, hs, ht)?;
    let (s_pts, t_pts): (Vec<f64>, Vec<f64>) = (0..lags.n_pairs()).map(|k| lags.star(k)).unzip();
    let (space, ms) = binned_kde_1d_with_mass(&s_pts, weights, s_axis, hs)?;
    let (time, mt) = binned_kde_1d_with_mass(&t_pts, weights, t_axis, ht)?;
    Ok(TriggeringDensity::new(
        TriggeringShape::Separable { space, time },
        lags,
        cfg.eps_s,
        ms * mt,
    ))
}

impl TriggeringDensity {
    fn new(shape: TriggeringShape, lags: &LagTable, eps_s: f64, captured_mass: f64) -> Self {
        TriggeringDensity {
            shape,
            sigma_s: lags.sigma_s,
            sigma_t: lags.sigma_t,
            anisotropy: lags.anisotropy,
            eps_s,
            captured_mass,
            metric: lags.anisotropy.metric(),
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.shape, TriggeringShape::Separable { .. })
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    /// Density in the transformed plane.
    #[inline]
    pub fn eval_star(&self, s: f64, t: f64) -> f64 {
        match &self.shape {
            TriggeringShape::NonSeparable { grid } => grid.eval(s, t),
            TriggeringShape::Separable { space, time } => space.eval(s) * time.eval(t),
        }
    }

    /// Integral of the transformed density over its grid.
    pub fn star_integral(&self) -> f64 {
        match &self.shape {
            TriggeringShape::NonSeparable { grid } => grid.integral(),
            TriggeringShape::Separable { space, time } => space.integral() * time.integral(),
        }
    }

    /// Upper ends of the transformed grid.
    pub fn star_extent(&self) -> (f64, f64) {
        match &self.shape {
            TriggeringShape::NonSeparable { grid } => (grid.x.max, grid.y.max),
            TriggeringShape::Separable { space, time } => (space.axis.max, time.axis.max),
        }
    }

    /// Largest time lag with nonzero density, in days.
    pub fn max_dt(&self) -> f64 {
        (self.star_extent().1 * self.sigma_t).exp_m1()
    }

    /// Largest Mahalanobis lag with nonzero density, in degrees.
    pub fn max_ds(&self) -> f64 {
        (self.star_extent().0 * self.sigma_s).exp_m1()
    }

    /// `g0(ds, dt)` per (degree * day) without argument checks; zero for
    /// `dt <= 0`.
    #[inline]
    pub fn g0(&self, ds: f64, dt: f64) -> f64 {
        if !(dt > 0.0) || ds < 0.0 {
            return 0.0;
        }
        let s = ds.ln_1p() / self.sigma_s;
        let t = dt.ln_1p() / self.sigma_t;
        let v = self.eval_star(s, t);
        if v == 0.0 {
            return 0.0;
        }
        v / (self.sigma_s * self.sigma_t * (1.0 + ds) * (1.0 + dt))
    }

    /// Writes `ds,dt,g0` on a lattice of `nodes x nodes` lags spaced
    /// logarithmically from `min_lag` to the density's support.
    pub fn write_lattice_csv<W: std::io::Write>(&self, out: W, nodes: usize, min_lag: f64) -> Result<()> {
        if nodes < 2 || !(min_lag > 0.0) {
            return Err(EtasError::InvalidParameter(
                "lattice needs at least 2 nodes and a positive minimum lag".into(),
            ));
        }
        let axis = |max: f64| -> Vec<f64> {
            let (lo, hi) = (min_lag.ln(), max.max(min_lag * 10.0).ln());
            (0..nodes)
                .map(|k| (lo + (hi - lo) * k as f64 / (nodes - 1) as f64).exp())
                .collect()
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["ds", "dt", "g0"])?;
        for ds in axis(self.max_ds()) {
            for dt in axis(self.max_dt()) {
                w.write_record([ds.to_string(), dt.to_string(), self.g0(ds, dt).to_string()])?;
            }
        }
        w.flush().map_err(|e| EtasError::io("<lattice>", e))?;
        Ok(())
    }

    /// Back-transformed radial-temporal density.
    pub fn eval_g0(&self, ds: f64, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(EtasError::Domain(format!("time lag must be positive, got {dt}")));
        }
        if !(ds >= 0.0) {
            return Err(EtasError::Domain(format!("spatial lag must be non-negative, got {ds}")));
        }
        Ok(self.g0(ds, dt))
    }

    /// `g(dx, dy, dt) = g0(d_M, dt) / (2 pi d_M)` per (degree^2 * day).
    #[inline]
    pub fn eval_g(&self, dx: f64, dy: f64, dt: f64) -> f64 {
        let d = self.metric.lag(dx, dy);
        self.g_at_lag(d, dt)
    }

    /// Same as [`eval_g`](Self::eval_g) for a precomputed Mahalanobis lag.
    #[inline]
    pub fn g_at_lag(&self, d: f64, dt: f64) -> f64 {
        let v = self.g0(d, dt);
        if v == 0.0 {
            return 0.0;
        }
        v / (2.0 * PI * d.max(self.eps_s))
    }

    /// `g` for pair `k` of the lag table this density was fitted on.
    #[inline]
    pub fn g_for_pair(&self, lags: &LagTable, k: usize) -> f64 {
        let v = self.eval_star(lags.s_star[k], lags.t_star[k]);
        if v == 0.0 {
            return 0.0;
        }
        let (ds, dt) = (lags.ds[k], lags.dt[k]);
        v / (self.sigma_s * self.sigma_t * (1.0 + ds) * (1.0 + dt) * 2.0 * PI * ds.max(self.eps_s))
    }

    /// Temporal marginal density over transformed time nodes and its axis.
    fn temporal_marginal(&self) -> (GridAxis, Vec<f64>) {
        match &self.shape {
            TriggeringShape::NonSeparable { grid } => (grid.y, grid.marginal_y()),
            TriggeringShape::Separable { space, time } => {
                let mass = space.integral();
                (time.axis, time.values.iter().map(|v| v * mass).collect())
            }
        }
    }

    /// Median of the fitted temporal marginal, in days.
    pub fn temporal_median_days(&self) -> f64 {
        let (axis, density) = self.temporal_marginal();
        let total = piecewise_linear_cumulative(&axis, &density, axis.max);
        let target = 0.5 * total;
        let t_star = invert_piecewise_linear_cdf(&axis, &density, target);
        (t_star * self.sigma_t).exp_m1()
    }

    /// Mass of the temporal marginal on `(0, dt]`.
    pub fn temporal_cdf(&self, dt: f64) -> f64 {
        let (axis, density) = self.temporal_marginal();
        let t = dt.max(0.0).ln_1p() / self.sigma_t;
        piecewise_linear_cumulative(&axis, &density, t)
    }

    /// Spatial marginal density in original units at Mahalanobis lag `ds`.
    pub fn spatial_marginal_g01(&self, ds: f64) -> f64 {
        let s = ds.max(0.0).ln_1p() / self.sigma_s;
        let v = match &self.shape {
            TriggeringShape::NonSeparable { grid } => {
                let axis = grid.x;
                let marginal = grid.marginal_x();
                linear_interp(&axis, &marginal, s)
            }
            TriggeringShape::Separable { space, time } => space.eval(s) * time.integral(),
        };
        v / (self.sigma_s * (1.0 + ds))
    }

    /// Tables for windowed mass integrals of this density.
    pub fn mass_integrator(&self) -> MassIntegrator<'_> {
        MassIntegrator::new(self)
    }
}

fn linear_interp(axis: &GridAxis, values: &[f64], x: f64) -> f64 {
    if !axis.contains(x) {
        return 0.0;
    }
    let step = axis.step();
    let r = (x - axis.min) / step;
    let i = (r.floor() as usize).min(axis.nodes - 2);
    let f = r - i as f64;
    (1.0 - f) * values[i] + f * values[i + 1]
}

/// Running integral of the linear interpolant of nodal values.
#[derive(Debug, Clone)]
struct Cumulative {
    axis: GridAxis,
    values: Vec<f64>,
    prefix: Vec<f64>,
}

impl Cumulative {
    fn new(axis: GridAxis, values: Vec<f64>) -> Self {
        let step = axis.step();
        let mut prefix = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        prefix.push(0.0);
        for k in 1..values.len() {
            acc += 0.5 * step * (values[k - 1] + values[k]);
            prefix.push(acc);
        }
        Cumulative { axis, values, prefix }
    }

    fn total(&self) -> f64 {
        *self.prefix.last().unwrap_or(&0.0)
    }

    /// `int_{axis.min}^{x}`, exact for the interpolant.
    fn at(&self, x: f64) -> f64 {
        if !(x > self.axis.min) {
            return 0.0;
        }
        let step = self.axis.step();
        let x = x.min(self.axis.max);
        let r = (x - self.axis.min) / step;
        let i = (r.floor() as usize).min(self.axis.nodes - 2);
        let u = x - (self.axis.min + i as f64 * step);
        let (a, b) = (self.values[i], self.values[i + 1]);
        self.prefix[i] + a * u + (b - a) * u * u / (2.0 * step)
    }

    /// Smallest `x` with `at(x) = target`.
    fn invert(&self, target: f64) -> f64 {
        let step = self.axis.step();
        let k = self.prefix.partition_point(|&c| c < target);
        if k == 0 {
            return self.axis.min;
        }
        if k >= self.prefix.len() {
            return self.axis.max;
        }
        let k = k - 1;
        let need = target - self.prefix[k];
        let (a, b) = (self.values[k], self.values[k + 1]);
        let slope = (b - a) / step;
        // a u + slope u^2 / 2 = need
        let u = if slope.abs() < 1e-300 {
            need / a
        } else {
            (-a + (a * a + 2.0 * slope * need).max(0.0).sqrt()) / slope
        };
        self.axis.min + k as f64 * step + u.clamp(0.0, step)
    }
}

fn piecewise_linear_cumulative(axis: &GridAxis, values: &[f64], x: f64) -> f64 {
    Cumulative::new(*axis, values.to_vec()).at(x)
}

fn invert_piecewise_linear_cdf(axis: &GridAxis, values: &[f64], target: f64) -> f64 {
    Cumulative::new(*axis, values.to_vec()).invert(target)
}

/// Windowed mass of the triggering density over a rectangle and a time
/// window, `int_D int_0^tau g(x - x_j, y - y_j, t) dt dx dy`.
///
/// Temporal integration is exact for the interpolated density; the spatial
/// part integrates in whitened polar coordinates around the parent, where
/// the density is radial, using the midpoint rule over `angles` directions.
pub struct MassIntegrator<'a> {
    density: &'a TriggeringDensity,
    /// Cumulative integral along t at every s node (non-separable only).
    cum_t: Vec<f64>,
    /// Separable factors.
    space: Option<Cumulative>,
    time: Option<Cumulative>,
}

impl<'a> MassIntegrator<'a> {
    fn new(density: &'a TriggeringDensity) -> Self {
        match &density.shape {
            TriggeringShape::NonSeparable { grid } => {
                let (ns, nt) = (grid.x.nodes, grid.y.nodes);
                let step = grid.y.step();
                let mut cum = vec![0.0; ns * nt];
                for i in 0..ns {
                    let mut acc = 0.0;
                    for k in 1..nt {
                        acc += 0.5 * step * (grid.values[i * nt + k - 1] + grid.values[i * nt + k]);
                        cum[i * nt + k] = acc;
                    }
                }
                MassIntegrator {
                    density,
                    cum_t: cum,
                    space: None,
                    time: None,
                }
            }
            TriggeringShape::Separable { space, time } => MassIntegrator {
                density,
                cum_t: Vec::new(),
                space: Some(Cumulative::new(space.axis, space.values.clone())),
                time: Some(Cumulative::new(time.axis, time.values.clone())),
            },
        }
    }

    /// Radial profile `r -> int_0^tau int_0^r g0` for a fixed window.
    fn radial_profile(&self, tau: f64) -> RadialProfile {
        let t = tau.max(0.0).ln_1p() / self.density.sigma_t;
        match &self.density.shape {
            TriggeringShape::NonSeparable { grid } => {
                let nt = grid.y.nodes;
                let tt = t.min(grid.y.max);
                let step = grid.y.step();
                let k = ((tt / step).floor() as usize).min(nt - 2);
                let u = tt - k as f64 * step;
                let values = (0..grid.x.nodes)
                    .map(|i| {
                        if t <= 0.0 {
                            return 0.0;
                        }
                        let a = grid.values[i * nt + k];
                        let b = grid.values[i * nt + k + 1];
                        self.cum_t[i * nt + k] + a * u + (b - a) * u * u / (2.0 * step)
                    })
                    .collect();
                RadialProfile::Owned(Cumulative::new(grid.x, values), 1.0)
            }
            TriggeringShape::Separable { .. } => {
                let time_mass = self.time.as_ref().map_or(0.0, |c| c.at(t));
                RadialProfile::Shared(time_mass)
            }
        }
    }

    fn radial_mass(&self, profile: &RadialProfile, r: f64) -> f64 {
        let s = r.max(0.0).ln_1p() / self.density.sigma_s;
        match profile {
            RadialProfile::Owned(c, scale) => c.at(s) * scale,
            RadialProfile::Shared(time_mass) => self.space.as_ref().map_or(0.0, |c| c.at(s)) * time_mass,
        }
    }

    /// Total mass of the density on its grid.
    pub fn total(&self) -> f64 {
        match (&self.space, &self.time) {
            (Some(s), Some(t)) => s.total() * t.total(),
            _ => self.radial_profile(f64::INFINITY).total(),
        }
    }

    /// Physical offsets of unit Mahalanobis length at `angles` equally
    /// spaced whitened directions.
    pub fn directions(&self, angles: usize) -> Vec<(f64, f64)> {
        let metric = self.density.metric();
        let angles = angles.max(4);
        let dphi = 2.0 * PI / angles as f64;
        (0..angles)
            .map(|k| {
                let phi = (k as f64 + 0.5) * dphi;
                metric.offset(phi.cos(), phi.sin())
            })
            .collect()
    }

    /// Mass of the offspring of a parent at `(lon, lat)` falling inside
    /// `domain` within `tau` days.
    pub fn windowed_mass(&self, lon: f64, lat: f64, tau: f64, domain: &Domain, angles: usize) -> f64 {
        self.windowed_mass_along(lon, lat, tau, domain, &self.directions(angles))
    }

    /// [`windowed_mass`](Self::windowed_mass) with precomputed directions.
    pub fn windowed_mass_along(&self, lon: f64, lat: f64, tau: f64, domain: &Domain, directions: &[(f64, f64)]) -> f64 {
        if !(tau > 0.0) || directions.is_empty() {
            return 0.0;
        }
        let profile = self.radial_profile(tau);
        let mut acc = 0.0;
        for &(dx, dy) in directions {
            let r = ray_exit(lon, lat, dx, dy, domain);
            acc += self.radial_mass(&profile, r);
        }
        acc / directions.len() as f64
    }
}

enum RadialProfile {
    Owned(Cumulative, f64),
    Shared(f64),
}

impl RadialProfile {
    fn total(&self) -> f64 {
        match self {
            RadialProfile::Owned(c, scale) => c.total() * scale,
            RadialProfile::Shared(m) => *m,
        }
    }
}

/// Distance along `(dx, dy)` (in units of that vector) from an interior
/// point to the rectangle boundary.
fn ray_exit(x: f64, y: f64, dx: f64, dy: f64, domain: &Domain) -> f64 {
    let mut r = f64::INFINITY;
    if dx > 0.0 {
        r = r.min((domain.lon_max - x) / dx);
    } else if dx < 0.0 {
        r = r.min((domain.lon_min - x) / dx);
    }
    if dy > 0.0 {
        r = r.min((domain.lat_max - y) / dy);
    } else if dy < 0.0 {
        r = r.min((domain.lat_min - y) / dy);
    }
    r.max(0.0)
}
