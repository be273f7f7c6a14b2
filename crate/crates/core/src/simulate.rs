//! Branching-process simulation of parametric ETAS catalogs with known
//! parent labels.
//!
//! Immigrants arrive as a homogeneous Poisson process (optionally plus
//! rectangular zones of extra rate); each event of magnitude `m` has a
//! Poisson number of direct children with mean `a0 exp(a m)` times the
//! productivity multiplier of its zone. Child time lags follow the modified
//! Omori density normalized on `(0, T - t_parent]`, spatial offsets a
//! Gaussian or inverse-power law in whitened coordinates mapped through
//! `S^{1/2}`. Children landing outside the domain are dropped.

use std::collections::VecDeque;
use std::f64::consts::{LN_10, PI};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Domain, Event};
use crate::error::{EtasError, Result};
use crate::geometry::{AnisotropyParams, Metric};
use crate::intensity::HawkesComponents;

/// Spatial offset law of direct children.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialLaw {
    /// `g1 = exp(-r^2 / (2 d)) / (2 pi d)`.
    Gaussian { d: f64 },
    /// `g1 = (q - 1) / (pi d) (1 + r^2 / d)^{-q}`.
    Power { d: f64, q: f64 },
}

impl SpatialLaw {
    /// Density per degree^2 at whitened squared distance `r2`.
    pub fn density(&self, r2: f64) -> f64 {
        match *self {
            SpatialLaw::Gaussian { d } => (-r2 / (2.0 * d)).exp() / (2.0 * PI * d),
            SpatialLaw::Power { d, q } => (q - 1.0) / (PI * d) * (1.0 + r2 / d).powf(-q),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        match *self {
            SpatialLaw::Gaussian { d } => {
                let s = d.sqrt();
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (s * a, s * b)
            }
            SpatialLaw::Power { d, q } => {
                let u: f64 = rng.random();
                let r = (d * ((1.0 - u).powf(1.0 / (1.0 - q)) - 1.0)).sqrt();
                let phi = 2.0 * PI * rng.random::<f64>();
                (r * phi.cos(), r * phi.sin())
            }
        }
    }
}

/// Rectangle carrying either extra background rate or a productivity
/// multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub rect: Domain,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub domain: Domain,
    pub t_len_days: f64,
    /// Background rate per (degree^2 * day) over the whole domain.
    pub mu0: f64,
    pub a0: f64,
    pub a: f64,
    pub omori_c: f64,
    pub omori_p: f64,
    pub spatial: SpatialLaw,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default)]
    pub theta_deg: f64,
    pub b_value: f64,
    pub m0: f64,
    pub seed: u64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    /// Extra background rates, added inside each rectangle.
    #[serde(default)]
    pub background_zones: Vec<Zone>,
    /// Productivity multipliers; the first zone containing a parent applies.
    #[serde(default)]
    pub productivity_zones: Vec<Zone>,
}

fn one() -> f64 {
    1.0
}

fn default_max_events() -> usize {
    1_000_000
}

impl SimConfig {
    pub fn anisotropy(&self) -> Result<AnisotropyParams> {
        AnisotropyParams::new(self.eta, self.theta_deg.to_radians())
    }

    pub fn beta(&self) -> f64 {
        self.b_value * LN_10
    }

    /// `a0 exp(a m)`.
    pub fn kappa(&self, m: f64) -> f64 {
        self.a0 * (self.a * m).exp()
    }

    pub fn multiplier(&self, lon: f64, lat: f64) -> f64 {
        self.productivity_zones
            .iter()
            .find(|z| z.rect.contains(lon, lat))
            .map_or(1.0, |z| z.value)
    }

    pub fn background_rate(&self, lon: f64, lat: f64) -> f64 {
        if !self.domain.contains(lon, lat) {
            return 0.0;
        }
        self.mu0
            + self
                .background_zones
                .iter()
                .filter(|z| z.rect.contains(lon, lat))
                .map(|z| z.value)
                .sum::<f64>()
    }

    /// Expected number of immigrants over the window.
    pub fn expected_background(&self) -> f64 {
        let zones: f64 = self
            .background_zones
            .iter()
            .filter_map(|z| intersect(&z.rect, &self.domain).map(|r| r.area() * z.value))
            .sum();
        (self.mu0 * self.domain.area() + zones) * self.t_len_days
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EtasError::InvalidParameter(m));
        if !(self.t_len_days > 0.0) {
            return bad(format!("T must be positive, got {}", self.t_len_days));
        }
        if !(self.mu0 >= 0.0) || !(self.a0 >= 0.0) {
            return bad("mu0 and a0 must be non-negative".into());
        }
        if !(self.omori_c > 0.0) || !(self.omori_p > 1.0) {
            return bad("Omori law needs c > 0 and p > 1".into());
        }
        match self.spatial {
            SpatialLaw::Gaussian { d } if !(d > 0.0) => return bad("spatial d must be positive".into()),
            SpatialLaw::Power { d, q } if !(d > 0.0) || !(q > 1.0) => {
                return bad("power law needs d > 0 and q > 1".into())
            }
            _ => {}
        }
        if !(self.b_value > 0.0) || !self.m0.is_finite() {
            return bad("b_value must be positive and m0 finite".into());
        }
        if self.background_zones.iter().any(|z| !(z.value >= 0.0)) {
            return bad("zone background rates must be non-negative".into());
        }
        if self.productivity_zones.iter().any(|z| !(z.value >= 0.0)) {
            return bad("productivity multipliers must be non-negative".into());
        }
        self.anisotropy()?;
        let n = branching_ratio(self)?;
        let worst = self
            .productivity_zones
            .iter()
            .map(|z| z.value)
            .fold(1.0f64, f64::max);
        if n * worst >= 1.0 {
            return bad(format!(
                "supercritical configuration: branching ratio {} (x{worst} in the most productive zone)",
                n
            ));
        }
        Ok(())
    }
}

fn intersect(a: &Domain, b: &Domain) -> Option<Domain> {
    let r = Domain {
        lon_min: a.lon_min.max(b.lon_min),
        lon_max: a.lon_max.min(b.lon_max),
        lat_min: a.lat_min.max(b.lat_min),
        lat_max: a.lat_max.min(b.lat_max),
    };
    (r.lon_max > r.lon_min && r.lat_max > r.lat_min).then_some(r)
}

/// Mean number of direct children `a0 beta / (beta - a) exp(a m0)` under the
/// Gutenberg-Richter law, without zone multipliers.
pub fn branching_ratio(cfg: &SimConfig) -> Result<f64> {
    let beta = cfg.beta();
    if cfg.a >= beta {
        return Err(EtasError::InvalidParameter(format!(
            "productivity exponent a = {} must be below b ln 10 = {beta}",
            cfg.a
        )));
    }
    Ok(cfg.a0 * beta / (beta - cfg.a) * (cfg.a * cfg.m0).exp())
}

/// `F(t) = 1 - (1 + t / c)^{1 - p}`.
pub fn omori_cdf(t: f64, c: f64, p: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    1.0 - (1.0 + t / c).powf(1.0 - p)
}

/// `f(t) = (p - 1) / c (1 + t / c)^{-p}`.
pub fn omori_density(t: f64, c: f64, p: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    (p - 1.0) / c * (1.0 + t / c).powf(-p)
}

/// Median of the untruncated Omori law, `c (2^{1/(p-1)} - 1)`.
pub fn omori_median(c: f64, p: f64) -> f64 {
    c * (2f64.powf(1.0 / (p - 1.0)) - 1.0)
}

/// Inverse-CDF draw from the Omori density truncated to `(0, horizon]`.
pub fn sample_omori_lag<R: Rng>(rng: &mut R, c: f64, p: f64, horizon: f64) -> f64 {
    let u: f64 = rng.random();
    let f = if horizon.is_finite() { omori_cdf(horizon, c, p) } else { 1.0 };
    let t = c * ((1.0 - u * f).powf(1.0 / (1.0 - p)) - 1.0);
    t.min(horizon)
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Simulated catalog with ground-truth branching labels.
#[derive(Debug, Clone)]
pub struct LabeledCatalog {
    pub catalog: Catalog,
    /// Parent index in `catalog.events()`, `None` for immigrants.
    pub parents: Vec<Option<usize>>,
    pub generations: Vec<u32>,
    /// Children generated, including those dropped outside the domain.
    pub children_drawn: usize,
    pub truncated: bool,
}

impl LabeledCatalog {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn background_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.parents.iter().filter(|p| p.is_none()).count() as f64 / self.len() as f64
    }

    /// Writes `event,parent,generation`, 1-based with parent 0 for immigrants.
    pub fn write_labels_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["event", "parent", "generation"])?;
        for (i, (p, g)) in self.parents.iter().zip(&self.generations).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                p.map_or(0, |p| p + 1).to_string(),
                g.to_string(),
            ])?;
        }
        w.flush().map_err(|e| EtasError::io("<labels>", e))?;
        Ok(())
    }
}

struct Draft {
    event: Event,
    parent: Option<usize>,
    generation: u32,
}

pub fn simulate(cfg: &SimConfig) -> Result<LabeledCatalog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let metric = cfg.anisotropy()?.metric();
    let mags = Exp::new(cfg.beta()).map_err(|e| EtasError::InvalidParameter(e.to_string()))?;
    let t_len = cfg.t_len_days;
    let mut drafts: Vec<Draft> = Vec::new();
    let mut truncated = false;

    let mut regions = vec![(cfg.domain, cfg.mu0)];
    for z in &cfg.background_zones {
        if let Some(r) = intersect(&z.rect, &cfg.domain) {
            regions.push((r, z.value));
        }
    }
    'immigrants: for (rect, rate) in regions {
        let n = poisson(&mut rng, rate * rect.area() * t_len);
        for _ in 0..n {
            if drafts.len() >= cfg.max_events {
                truncated = true;
                break 'immigrants;
            }
            let lon = rect.lon_min + rng.random::<f64>() * rect.width();
            let lat = rect.lat_min + rng.random::<f64>() * rect.height();
            let t = rng.random::<f64>() * t_len;
            let mag = cfg.m0 + mags.sample(&mut rng);
            drafts.push(Draft {
                event: Event::new(lon, lat, t, mag),
                parent: None,
                generation: 0,
            });
        }
    }

    let mut queue: VecDeque<usize> = (0..drafts.len()).collect();
    let mut children_drawn = 0;
    while let Some(j) = queue.pop_front() {
        if truncated {
            break;
        }
        let parent = drafts[j].event;
        let horizon = t_len - parent.t;
        if !(horizon > 0.0) {
            continue;
        }
        let mean = cfg.kappa(parent.mag) * cfg.multiplier(parent.lon, parent.lat);
        let n = poisson(&mut rng, mean);
        for _ in 0..n {
            children_drawn += 1;
            let dt = sample_omori_lag(&mut rng, cfg.omori_c, cfg.omori_p, horizon);
            let (a, b) = cfg.spatial.sample(&mut rng);
            let (dx, dy) = metric.offset(a, b);
            let mag = cfg.m0 + mags.sample(&mut rng);
            let (lon, lat, t) = (parent.lon + dx, parent.lat + dy, parent.t + dt);
            if !cfg.domain.contains(lon, lat) || !(t < t_len) {
                continue;
            }
            if drafts.len() >= cfg.max_events {
                truncated = true;
                break;
            }
            drafts.push(Draft {
                event: Event::new(lon, lat, t, mag),
                parent: Some(j),
                generation: drafts[j].generation + 1,
            });
            queue.push_back(drafts.len() - 1);
        }
    }

    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by(|&a, &b| drafts[a].event.t.total_cmp(&drafts[b].event.t));
    let mut rank = vec![0; drafts.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let events: Vec<Event> = order.iter().map(|&i| drafts[i].event).collect();
    let parents = order.iter().map(|&i| drafts[i].parent.map(|p| rank[p])).collect();
    let generations = order.iter().map(|&i| drafts[i].generation).collect();
    let catalog = Catalog::new(events, cfg.domain, t_len, 0.0)?;
    Ok(LabeledCatalog {
        catalog,
        parents,
        generations,
        children_drawn,
        truncated,
    })
}

/// The generating intensity of a [`SimConfig`], including the Omori
/// normalization on the remaining window.
#[derive(Debug, Clone)]
pub struct ParametricEtas {
    pub config: SimConfig,
    metric: Metric,
}

impl ParametricEtas {
    pub fn new(config: SimConfig) -> Result<Self> {
        let metric = config.anisotropy()?.metric();
        Ok(ParametricEtas { config, metric })
    }
}

impl HawkesComponents for ParametricEtas {
    fn background(&self, lon: f64, lat: f64) -> f64 {
        self.config.background_rate(lon, lat)
    }

    fn productivity(&self, parent: &Event) -> f64 {
        self.config.kappa(parent.mag) * self.config.multiplier(parent.lon, parent.lat)
    }

    fn triggering(&self, parent: &Event, dx: f64, dy: f64, dt: f64) -> f64 {
        let c = &self.config;
        let horizon = c.t_len_days - parent.t;
        if !(dt > 0.0) || dt > horizon {
            return 0.0;
        }
        let temporal = omori_density(dt, c.omori_c, c.omori_p) / omori_cdf(horizon, c.omori_c, c.omori_p);
        let d = self.metric.lag(dx, dy);
        temporal * c.spatial.density(d * d)
    }
}
