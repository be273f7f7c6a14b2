//! Model-independent stochastic declustering: an EM-style iteration that
//! alternates nonparametric estimation of the background rate, productivity,
//! productivity correction and triggering density with updates of the
//! triggering-probability matrix.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::catalog::{Catalog, Domain, Event};
use crate::error::{EtasError, Result};
use crate::geometry::AnisotropyParams;
use crate::kernels::{
    abramson_bandwidths, knn_bandwidth_1d, nadaraya_watson, select_knn_k, weighted_kde_2d_adaptive, KNN_FLOOR,
};
use crate::registry::{AlphaInputs, AlphaSurface, ModelFamily, ProductivityStrategy, Registry};
use crate::triggering::{LagOptions, LagTable, TriggeringConfig, TriggeringDensity, DEFAULT_EPS_T};

/// Lower-triangular triggering probabilities. Row `i` holds `p_ii` and
/// `p_ij` for every admissible parent `j`; inadmissible entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggeringMatrix {
    parents: Vec<Range<usize>>,
    offsets: Vec<usize>,
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl TriggeringMatrix {
    fn from_parents(parents: Vec<Range<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(parents.len() + 1);
        let mut total = 0;
        for r in &parents {
            offsets.push(total);
            total += r.len();
        }
        offsets.push(total);
        let diag = parents.iter().map(|r| 1.0 / (r.len() + 1) as f64).collect();
        let off = parents
            .iter()
            .flat_map(|r| std::iter::repeat_n(1.0 / (r.len() + 1) as f64, r.len()))
            .collect();
        TriggeringMatrix {
            parents,
            offsets,
            diag,
            off,
        }
    }

    /// Uniform over each event and its admissible parents.
    pub fn uniform(lags: &LagTable) -> Self {
        TriggeringMatrix::from_parents((0..lags.n_events()).map(|i| lags.parents(i)).collect())
    }

    /// Every event a background event.
    pub fn identity(n: usize) -> Self {
        TriggeringMatrix::from_parents(vec![0..0; n])
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entries in lag-table pair order.
    pub fn off_diagonal(&self) -> &[f64] {
        &self.off
    }

    pub fn parents(&self, i: usize) -> Range<usize> {
        self.parents[i].clone()
    }

    pub fn row(&self, i: usize) -> (f64, &[f64]) {
        (self.diag[i], &self.off[self.offsets[i]..self.offsets[i + 1]])
    }

    /// `p_ij`, zero when `j` is not an admissible parent of `i`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let r = &self.parents[i];
        if r.contains(&j) {
            self.off[self.offsets[i] + j - r.start]
        } else {
            0.0
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let (d, o) = self.row(i);
        d + o.iter().sum::<f64>()
    }

    /// Eventwise productivities `sum_{i>j} p_ij` for every `j`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for i in 0..self.n() {
            let (_, o) = self.row(i);
            for (j, p) in self.parents[i].clone().zip(o) {
                out[j] += p;
            }
        }
        out
    }

    pub fn background_total(&self) -> f64 {
        self.diag.iter().sum()
    }

    pub fn max_abs_change(&self, other: &TriggeringMatrix) -> f64 {
        let d = self
            .diag
            .iter()
            .zip(&other.diag)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.off
            .iter()
            .zip(&other.off)
            .map(|(a, b)| (a - b).abs())
            .fold(d, f64::max)
    }
}

/// Initial matrix `p_ij = 1 / i` over the full lower triangle (1-based `i`).
pub fn init_probabilities(n: usize) -> Result<TriggeringMatrix> {
    if n == 0 {
        return Err(EtasError::EmptyCatalog);
    }
    Ok(TriggeringMatrix::from_parents((0..n).map(|i| 0..i).collect()))
}

/// Background rate `mu(x, y) = sum_i w_i G_{h_i}`, with `w_i = p_ii / T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRate {
    pub support: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub pilot_bandwidth: f64,
}

impl BackgroundRate {
    /// Events per (degree^2 * day).
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        weighted_kde_2d_adaptive(&self.support, &self.weights, &self.bandwidths, (x, y))
    }

    /// Integral over the plane, per day.
    pub fn total_rate(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Integral over `domain`, per day, exact for the Gaussian kernels.
    pub fn rate_in(&self, domain: &Domain) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .zip(&self.bandwidths)
            .map(|((p, w), h)| w * gaussian_rect_mass(p.0, p.1, *h, domain))
            .sum()
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of an isotropic Gaussian centred at `(x, y)` inside `domain`.
pub fn gaussian_rect_mass(x: f64, y: f64, h: f64, domain: &Domain) -> f64 {
    let fx = normal_cdf((domain.lon_max - x) / h) - normal_cdf((domain.lon_min - x) / h);
    let fy = normal_cdf((domain.lat_max - y) / h) - normal_cdf((domain.lat_min - y) / h);
    fx * fy
}

/// Nadaraya-Watson smooth of eventwise productivity over magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductivityCurve {
    pub support: Vec<f64>,
    pub responses: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub k: usize,
    pub cv_errors: Vec<(usize, f64)>,
}

impl ProductivityCurve {
    pub fn zero() -> Self {
        ProductivityCurve {
            support: Vec::new(),
            responses: Vec::new(),
            bandwidths: Vec::new(),
            k: 0,
            cv_errors: Vec::new(),
        }
    }

    /// Expected number of direct children at magnitude `m`. Far from the
    /// support, where every kernel underflows, the response of the nearest
    /// support magnitude is returned.
    pub fn eval(&self, m: f64) -> f64 {
        if self.support.is_empty() {
            return 0.0;
        }
        nadaraya_watson(&self.support, &self.responses, &self.bandwidths, m).unwrap_or_else(|| {
            let mut best = 0;
            for (i, s) in self.support.iter().enumerate() {
                if (s - m).abs() < (self.support[best] - m).abs() {
                    best = i;
                }
            }
            self.responses[best]
        })
    }
}

/// Fitted components of the conditional intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub mu: BackgroundRate,
    pub kappa: ProductivityCurve,
    pub alpha: AlphaSurface,
    /// `None` when no event carries triggering weight.
    pub g: Option<TriggeringDensity>,
}

impl Components {
    /// `alpha(x_j, y_j) kappa(m_j)`, the expected offspring of `e`.
    pub fn productivity(&self, e: &Event) -> f64 {
        if self.g.is_none() {
            return 0.0;
        }
        self.alpha.eval_or_one(e.lon, e.lat) * self.kappa.eval(e.mag)
    }
}

/// Fitting options. The model family fixes the strategies and `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub family: ModelFamily,
    pub theta_deg: f64,
    pub pilot_bandwidth: f64,
    pub triggering: TriggeringConfig,
    pub knn_grid: Vec<usize>,
    pub knn_floor: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_dt: Option<f64>,
    pub eps_t: f64,
    /// Angular directions for the windowed triggering integral.
    pub loglik_angles: usize,
    pub track_log_likelihood: bool,
    /// Use the constant-correction strategy whatever the family says.
    pub force_unit_alpha: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            family: ModelFamily::default(),
            theta_deg: 0.0,
            pilot_bandwidth: 0.5,
            triggering: TriggeringConfig::default(),
            knn_grid: vec![5, 10, 15, 20, 30, 40, 50, 75, 100, 150, 200],
            knn_floor: KNN_FLOOR,
            tolerance: 1e-3,
            max_iter: 200,
            max_dt: None,
            eps_t: DEFAULT_EPS_T,
            loglik_angles: 720,
            track_log_likelihood: true,
            force_unit_alpha: false,
        }
    }
}

impl FitConfig {
    pub fn anisotropy(&self) -> Result<AnisotropyParams> {
        AnisotropyParams::new(self.family.eta, self.theta_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EtasError::Config(m.to_string()));
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.pilot_bandwidth > 0.0) {
            return bad("pilot_bandwidth must be positive");
        }
        let t = &self.triggering;
        if !(t.bandwidth > 0.0) || !(t.separable_bandwidths.0 > 0.0) || !(t.separable_bandwidths.1 > 0.0) {
            return bad("triggering bandwidths must be positive");
        }
        if t.grid_nodes < 2 {
            return bad("triggering grid needs at least 2 nodes");
        }
        if !(t.margin_bandwidths >= 0.0) || !(t.eps_s > 0.0) || !(self.eps_t > 0.0) {
            return bad("margins and floors must be positive");
        }
        if self.knn_grid.is_empty() || self.knn_grid.contains(&0) {
            return bad("knn_grid must be non-empty with entries >= 1");
        }
        if !(self.knn_floor > 0.0) {
            return bad("knn_floor must be positive");
        }
        if let Some(w) = self.max_dt {
            if !(w > 0.0) {
                return bad("max_dt must be positive");
            }
        }
        if self.loglik_angles < 4 {
            return bad("loglik_angles must be at least 4");
        }
        self.anisotropy().map(|_| ())
    }
}

/// One EM iteration of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub max_change: f64,
    pub log_likelihood: Option<f64>,
    pub flagged_events: Vec<usize>,
}

/// Serialized result of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: String,
    pub family: ModelFamily,
    pub anisotropy: AnisotropyParams,
    pub domain: Domain,
    pub train_len_days: f64,
    pub n_events: usize,
    pub components: Components,
    pub a_star: f64,
    pub mainshock_fraction: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub config: FitConfig,
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `alpha(x, y)`, `None` where undefined.
    pub fn alpha(&self, x: f64, y: f64) -> Option<f64> {
        self.components.alpha.eval(x, y)
    }
}

/// Fit output together with the final probability matrix.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: FittedModel,
    pub probabilities: TriggeringMatrix,
}

/// Called with the iteration number (0 for the initial matrix) and the
/// current matrix.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &TriggeringMatrix);

/// `mu` from the diagonal with given per-event bandwidths.
pub fn background_from_bandwidths(
    events: &[Event],
    p: &TriggeringMatrix,
    train_len: f64,
    bandwidths: Vec<f64>,
    pilot: f64,
) -> Result<BackgroundRate> {
    let total = p.background_total();
    if !(total > 0.0) {
        return Err(EtasError::Degenerate("no background weight: sum of p_ii is zero".into()));
    }
    Ok(BackgroundRate {
        support: events.iter().map(|e| (e.lon, e.lat)).collect(),
        weights: p.diag().iter().map(|d| d / train_len).collect(),
        bandwidths,
        pilot_bandwidth: pilot,
    })
}

/// Background rate with Abramson bandwidths from a pilot of width `h0`
/// weighted by `p_ii`.
pub fn estimate_mu(events: &[Event], p: &TriggeringMatrix, train_len: f64, h0: f64) -> Result<BackgroundRate> {
    if !(p.background_total() > 0.0) {
        return Err(EtasError::Degenerate("no background weight: sum of p_ii is zero".into()));
    }
    let pts: Vec<(f64, f64)> = events.iter().map(|e| (e.lon, e.lat)).collect();
    let bw = abramson_bandwidths(&pts, p.diag(), h0)?;
    background_from_bandwidths(events, p, train_len, bw.per_point_h, h0)
}

fn knn_candidates(grid: &[usize], n_support: usize) -> Vec<usize> {
    let valid: Vec<usize> = grid.iter().copied().filter(|&k| k >= 1 && k < n_support).collect();
    if valid.is_empty() {
        (1..n_support).collect()
    } else {
        valid
    }
}

/// Productivity curve over parents `j = 1..N-1` with a fixed neighbour count.
pub fn estimate_kappa(events: &[Event], p: &TriggeringMatrix, k: usize, floor: f64) -> Result<ProductivityCurve> {
    let n = events.len();
    if n < 2 {
        return Err(EtasError::InsufficientData("productivity needs at least 2 events".into()));
    }
    let mags: Vec<f64> = events[..n - 1].iter().map(|e| e.mag).collect();
    let bandwidths = if mags.len() == 1 {
        vec![floor]
    } else {
        knn_bandwidth_1d(&mags, k, floor)?
    };
    Ok(ProductivityCurve {
        support: mags,
        responses: p.column_sums()[..n - 1].to_vec(),
        bandwidths,
        k,
        cv_errors: Vec::new(),
    })
}

/// Productivity correction over parents `j = 1..N-1` with bandwidths `h3`.
pub fn estimate_alpha(
    events: &[Event],
    p: &TriggeringMatrix,
    kappa: &ProductivityCurve,
    h3: &[f64],
    strategy: &dyn ProductivityStrategy,
) -> Result<AlphaSurface> {
    let n = events.len();
    if n < 2 || h3.len() < n - 1 {
        return Err(EtasError::InsufficientData("correction needs N-1 parents and bandwidths".into()));
    }
    let parents = &events[..n - 1];
    let epicenters: Vec<(f64, f64)> = parents.iter().map(|e| (e.lon, e.lat)).collect();
    let responses = p.column_sums()[..n - 1].to_vec();
    let kappa_at: Vec<f64> = parents.par_iter().map(|e| kappa.eval(e.mag)).collect();
    strategy.estimate(AlphaInputs {
        epicenters: &epicenters,
        responses: &responses,
        kappa: &kappa_at,
        bandwidths: &h3[..n - 1],
    })
}

/// New probabilities from fitted components. Rows are normalized by the
/// conditional intensity at each event.
pub fn update_probabilities(events: &[Event], lags: Option<&LagTable>, comps: &Components) -> Result<TriggeringMatrix> {
    update_with_intensity(events, lags, comps).map(|(p, _)| p)
}

/// Updated matrix together with the intensity `lambda_i` at every event.
fn update_with_intensity(
    events: &[Event],
    lags: Option<&LagTable>,
    comps: &Components,
) -> Result<(TriggeringMatrix, Vec<f64>)> {
    let n = events.len();
    let mu_at: Vec<f64> = events.par_iter().map(|e| comps.mu.eval(e.lon, e.lat)).collect();
    let Some(lags) = lags else {
        return Ok((TriggeringMatrix::identity(n), mu_at));
    };
    let mut out = TriggeringMatrix::uniform(lags);
    let prod: Vec<f64> = events.par_iter().map(|e| comps.productivity(e)).collect();

    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest: &mut [f64] = &mut out.off;
    for i in 0..n {
        let (head, tail) = rest.split_at_mut(lags.pair_range(i).len());
        rows.push(head);
        rest = tail;
    }
    let diag: Vec<Result<(f64, f64)>> = rows
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            let parents = lags.parents(i);
            if parents.is_empty() {
                return Ok((1.0, mu_at[i]));
            }
            let mut lambda = mu_at[i];
            if let Some(g) = &comps.g {
                for ((slot, k), j) in row.iter_mut().zip(lags.pair_range(i)).zip(parents) {
                    let w = if prod[j] == 0.0 { 0.0 } else { prod[j] * g.g_for_pair(lags, k) };
                    *slot = w;
                    lambda += w;
                }
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(EtasError::ZeroIntensity { event: i });
            }
            row.iter_mut().for_each(|v| *v /= lambda);
            Ok((mu_at[i] / lambda, lambda))
        })
        .collect();
    let mut lambdas = Vec::with_capacity(n);
    for (i, d) in diag.into_iter().enumerate() {
        let (p, lambda) = d?;
        out.diag[i] = p;
        lambdas.push(lambda);
    }
    Ok((out, lambdas))
}

/// Value of the expected complete log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub value: f64,
    /// Events where a positive-probability term met zero intensity.
    pub flagged_events: Vec<usize>,
}

const INTENSITY_FLOOR: f64 = 1e-300;

/// `sum p_ii log mu_i + sum p_ij log nu_ij - int mu - sum_j int nu_j` over
/// `domain x [0, T]`.
pub fn complete_log_likelihood(
    events: &[Event],
    domain: &Domain,
    train_len: f64,
    lags: Option<&LagTable>,
    p: &TriggeringMatrix,
    comps: &Components,
    angles: usize,
) -> LogLikelihood {
    let prod: Vec<f64> = events.par_iter().map(|e| comps.productivity(e)).collect();
    let terms: Vec<(f64, bool)> = (0..events.len())
        .into_par_iter()
        .map(|i| {
            let e = &events[i];
            let (pii, row) = p.row(i);
            let mut acc = 0.0;
            let mut flagged = false;
            if pii > 0.0 {
                let mu = comps.mu.eval(e.lon, e.lat);
                if !(mu > 0.0) {
                    flagged = true;
                }
                acc += pii * mu.max(INTENSITY_FLOOR).ln();
            }
            if let (Some(lags), Some(g)) = (lags, &comps.g) {
                for ((k, j), pij) in lags.pair_range(i).zip(lags.parents(i)).zip(row) {
                    if *pij > 0.0 {
                        let nu = prod[j] * g.g_for_pair(lags, k);
                        if !(nu > 0.0) {
                            flagged = true;
                        }
                        acc += pij * nu.max(INTENSITY_FLOOR).ln();
                    }
                }
            }
            (acc, flagged)
        })
        .collect();
    let value: f64 = terms.iter().map(|t| t.0).sum();
    let flagged_events = terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.1)
        .map(|(i, _)| i)
        .collect();
    LogLikelihood {
        value: value - compensator(events, domain, train_len, comps, &prod, angles),
        flagged_events,
    }
}

/// `int mu + sum_j int nu_j` over `domain x [0, T]`.
fn compensator(events: &[Event], domain: &Domain, train_len: f64, comps: &Components, prod: &[f64], angles: usize) -> f64 {
    let mut total = comps.mu.rate_in(domain) * train_len;
    if let Some(g) = &comps.g {
        let integrator = g.mass_integrator();
        let directions = integrator.directions(angles);
        let masses: Vec<f64> = events
            .par_iter()
            .zip(prod)
            .map(|(e, &k)| {
                if k == 0.0 {
                    0.0
                } else {
                    k * integrator.windowed_mass_along(e.lon, e.lat, train_len - e.t, domain, &directions)
                }
            })
            .collect();
        total += masses.iter().sum::<f64>();
    }
    total
}

/// The same value for a matrix that is the posterior of `comps`, using
/// `p_ij log nu_ij = p_ij log(p_ij lambda_i)`.
fn posterior_log_likelihood(
    events: &[Event],
    domain: &Domain,
    train_len: f64,
    p: &TriggeringMatrix,
    lambdas: &[f64],
    comps: &Components,
    angles: usize,
) -> LogLikelihood {
    let terms: Vec<f64> = (0..events.len())
        .into_par_iter()
        .map(|i| {
            let (d, row) = p.row(i);
            let entropy: f64 = std::iter::once(&d)
                .chain(row)
                .filter(|v| **v > 0.0)
                .map(|v| v * v.ln())
                .sum();
            lambdas[i].ln() + entropy
        })
        .collect();
    let prod: Vec<f64> = events.par_iter().map(|e| comps.productivity(e)).collect();
    LogLikelihood {
        value: terms.iter().sum::<f64>() - compensator(events, domain, train_len, comps, &prod, angles),
        flagged_events: Vec::new(),
    }
}

#[derive(Debug, Clone)]
struct Bandwidths {
    mu: Vec<f64>,
    knn_k: usize,
    knn_h: Vec<f64>,
    cv_errors: Vec<(usize, f64)>,
}

struct Context<'a> {
    events: &'a [Event],
    train_len: f64,
    cfg: &'a FitConfig,
    lags: Option<&'a LagTable>,
    productivity: &'a dyn ProductivityStrategy,
    registry: &'a Registry,
}

fn select_bandwidths(ctx: &Context<'_>, p: &TriggeringMatrix, previous: Option<&Bandwidths>) -> Result<Bandwidths> {
    let events = ctx.events;
    let n = events.len();
    let pts: Vec<(f64, f64)> = events.iter().map(|e| (e.lon, e.lat)).collect();
    let mu = match abramson_bandwidths(&pts, p.diag(), ctx.cfg.pilot_bandwidth) {
        Ok(b) => b.per_point_h,
        Err(e) => match previous {
            Some(prev) => prev.mu.clone(),
            None => return Err(e),
        },
    };
    let floor = ctx.cfg.knn_floor;
    if n < 3 {
        return Ok(Bandwidths {
            mu,
            knn_k: 0,
            knn_h: vec![floor; n.saturating_sub(1)],
            cv_errors: Vec::new(),
        });
    }
    let mags: Vec<f64> = events[..n - 1].iter().map(|e| e.mag).collect();
    let responses = &p.column_sums()[..n - 1];
    let grid = knn_candidates(&ctx.cfg.knn_grid, mags.len());
    let sel = select_knn_k(&mags, responses, &grid, floor)?;
    let knn_h = knn_bandwidth_1d(&mags, sel.k, floor)?;
    Ok(Bandwidths {
        mu,
        knn_k: sel.k,
        knn_h,
        cv_errors: sel.cv_errors,
    })
}

fn estimate_components(ctx: &Context<'_>, p: &TriggeringMatrix, bw: &Bandwidths) -> Result<Components> {
    let events = ctx.events;
    let n = events.len();
    let mu = background_from_bandwidths(events, p, ctx.train_len, bw.mu.clone(), ctx.cfg.pilot_bandwidth)?;
    let no_trigger = Components {
        mu: mu.clone(),
        kappa: ProductivityCurve::zero(),
        alpha: AlphaSurface::Constant { a_star: 1.0 },
        g: None,
    };
    let Some(lags) = ctx.lags else {
        return Ok(no_trigger);
    };
    if !(p.off_diagonal().iter().sum::<f64>() > 0.0) {
        return Ok(no_trigger);
    }

    let kappa = ProductivityCurve {
        support: events[..n - 1].iter().map(|e| e.mag).collect(),
        responses: p.column_sums()[..n - 1].to_vec(),
        bandwidths: bw.knn_h.clone(),
        k: bw.knn_k,
        cv_errors: bw.cv_errors.clone(),
    };
    let alpha = estimate_alpha(events, p, &kappa, &bw.mu, ctx.productivity)?;
    let estimator = ctx.registry.triggering(&ctx.cfg.family.triggering.to_string())?;
    let g = estimator.fit(lags, p.off_diagonal(), &ctx.cfg.triggering)?;
    Ok(Components {
        mu,
        kappa,
        alpha,
        g: Some(g),
    })
}

/// Fits the training part of `catalog`.
pub fn fit(catalog: &Catalog, cfg: &FitConfig, registry: &Registry) -> Result<FitResult> {
    fit_events(
        catalog.training(),
        &catalog.domain,
        catalog.train_len_days,
        cfg,
        registry,
        None,
    )
}

/// Runs the iteration on time-sorted `events` observed on
/// `domain x [0, train_len)`.
pub fn fit_events(
    events: &[Event],
    domain: &Domain,
    train_len: f64,
    cfg: &FitConfig,
    registry: &Registry,
    mut observer: Option<Observer<'_>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let n = events.len();
    if n == 0 {
        return Err(EtasError::EmptyCatalog);
    }
    if !(train_len > 0.0) {
        return Err(EtasError::InvalidParameter("training length must be positive".into()));
    }
    if events.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(EtasError::Precondition("events must be sorted by time".into()));
    }
    let anisotropy = cfg.anisotropy()?;
    let productivity_key = if cfg.force_unit_alpha {
        "C".to_string()
    } else {
        cfg.family.productivity.to_string()
    };
    let productivity = registry.productivity(&productivity_key)?;
    registry.triggering(&cfg.family.triggering.to_string())?;

    let lags = if n < 2 {
        None
    } else {
        let options = LagOptions {
            max_dt: cfg.max_dt,
            eps_t: cfg.eps_t,
        };
        match LagTable::build(events, anisotropy, options) {
            Ok(l) => Some(l),
            Err(EtasError::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let ctx = Context {
        events,
        train_len,
        cfg,
        lags: lags.as_ref(),
        productivity: productivity.as_ref(),
        registry,
    };

    let mut p = match &lags {
        Some(l) => TriggeringMatrix::uniform(l),
        None => TriggeringMatrix::identity(n),
    };
    if let Some(obs) = observer.as_mut() {
        obs(0, &p);
    }
    let mut bw = select_bandwidths(&ctx, &p, None)?;
    let mut trace = Vec::new();
    let mut converged = lags.is_none();
    if lags.is_some() {
        for iteration in 1..=cfg.max_iter {
            let comps = estimate_components(&ctx, &p, &bw)?;
            let (next, lambdas) = update_with_intensity(events, lags.as_ref(), &comps)?;
            let max_change = next.max_abs_change(&p);
            let ll = cfg.track_log_likelihood.then(|| {
                posterior_log_likelihood(events, domain, train_len, &next, &lambdas, &comps, cfg.loglik_angles)
            });
            trace.push(IterationRecord {
                iteration,
                max_change,
                log_likelihood: ll.as_ref().map(|l| l.value),
                flagged_events: ll.map(|l| l.flagged_events).unwrap_or_default(),
            });
            p = next;
            if let Some(obs) = observer.as_mut() {
                obs(iteration, &p);
            }
            if max_change < cfg.tolerance {
                converged = true;
                break;
            }
            if iteration == 1 {
                bw = select_bandwidths(&ctx, &p, Some(&bw))?;
            }
        }
    }

    let components = estimate_components(&ctx, &p, &bw)?;
    let model = FittedModel {
        version: env!("CARGO_PKG_VERSION").to_string(),
        family: cfg.family,
        anisotropy,
        domain: *domain,
        train_len_days: train_len,
        n_events: n,
        a_star: components.alpha.a_star(),
        components,
        mainshock_fraction: p.background_total() / n as f64,
        converged,
        iterations: trace.len(),
        trace,
        config: cfg.clone(),
    };
    Ok(FitResult {
        model,
        probabilities: p,
    })
}
