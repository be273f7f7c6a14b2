//! Named estimator strategies for the two model-family axes.
//!
//! A model family is written `XY-e:1`: `X` picks the productivity strategy
//! (`V` spatially varying correction, `C` constant), `Y` the triggering
//! estimator (`N` non-separable, `S` separable), and `e` is the anisotropy
//! ratio. Strategies are looked up by name or by their one-letter code.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EtasError, Result};
use crate::kernels::gaussian_kernel_2d;
use crate::triggering::{fit_nonseparable, fit_separable, LagTable, TriggeringConfig, TriggeringDensity};

/// Estimates the triggering density from weighted lag pairs.
pub trait TriggeringEstimator: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn code(&self) -> char;
    fn fit(&self, lags: &LagTable, weights: &[f64], cfg: &TriggeringConfig) -> Result<TriggeringDensity>;
}

/// Inputs to the productivity-correction step, indexed over candidate
/// parents.
#[derive(Debug, Clone, Copy)]
pub struct AlphaInputs<'a> {
    pub epicenters: &'a [(f64, f64)],
    /// Eventwise productivities `sum_{i>j} p_ij`.
    pub responses: &'a [f64],
    /// Smoothed productivity at each parent magnitude.
    pub kappa: &'a [f64],
    pub bandwidths: &'a [f64],
}

/// Builds the spatial productivity-correction surface.
pub trait ProductivityStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn code(&self) -> char;
    fn estimate(&self, inputs: AlphaInputs<'_>) -> Result<AlphaSurface>;
}

/// Fitted productivity-correction surface `alpha(x, y) = alpha*(x, y) / A*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSurface {
    Constant {
        a_star: f64,
    },
    Varying {
        support: Vec<(f64, f64)>,
        numerator_weights: Vec<f64>,
        denominator_weights: Vec<f64>,
        bandwidths: Vec<f64>,
        a_star: f64,
    },
}

impl AlphaSurface {
    pub fn a_star(&self) -> f64 {
        match self {
            AlphaSurface::Constant { a_star } | AlphaSurface::Varying { a_star, .. } => *a_star,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, AlphaSurface::Constant { .. })
    }

    /// `None` where the denominator kernel sum vanishes.
    pub fn eval(&self, x: f64, y: f64) -> Option<f64> {
        match self {
            AlphaSurface::Constant { .. } => Some(1.0),
            AlphaSurface::Varying {
                support,
                numerator_weights,
                denominator_weights,
                bandwidths,
                a_star,
            } => {
                let (mut num, mut den) = (0.0, 0.0);
                for (((p, r), k), h) in support
                    .iter()
                    .zip(numerator_weights)
                    .zip(denominator_weights)
                    .zip(bandwidths)
                {
                    let g = gaussian_kernel_2d(x - p.0, y - p.1, *h);
                    num += r * g;
                    den += k * g;
                }
                (den > 0.0).then(|| num / den / a_star)
            }
        }
    }

    /// Value used inside intensities: undefined regions fall back to 1.
    pub fn eval_or_one(&self, x: f64, y: f64) -> f64 {
        self.eval(x, y).unwrap_or(1.0)
    }
}

fn a_star(inputs: &AlphaInputs<'_>) -> Result<f64> {
    let num: f64 = inputs.responses.iter().sum();
    let den: f64 = inputs.kappa.iter().sum();
    if !(den > 0.0) {
        return Err(EtasError::Degenerate("smoothed productivity is zero everywhere".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NonSeparableKde;

impl TriggeringEstimator for NonSeparableKde {
    fn name(&self) -> &'static str {
        "nonseparable"
    }
    fn code(&self) -> char {
        'N'
    }
    fn fit(&self, lags: &LagTable, weights: &[f64], cfg: &TriggeringConfig) -> Result<TriggeringDensity> {
        fit_nonseparable(lags, weights, cfg)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SeparableKde;

impl TriggeringEstimator for SeparableKde {
    fn name(&self) -> &'static str {
        "separable"
    }
    fn code(&self) -> char {
        'S'
    }
    fn fit(&self, lags: &LagTable, weights: &[f64], cfg: &TriggeringConfig) -> Result<TriggeringDensity> {
        fit_separable(lags, weights, cfg)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct VaryingAlpha;

impl ProductivityStrategy for VaryingAlpha {
    fn name(&self) -> &'static str {
        "varying"
    }
    fn code(&self) -> char {
        'V'
    }
    fn estimate(&self, inputs: AlphaInputs<'_>) -> Result<AlphaSurface> {
        let a_star = a_star(&inputs)?;
        Ok(AlphaSurface::Varying {
            support: inputs.epicenters.to_vec(),
            numerator_weights: inputs.responses.to_vec(),
            denominator_weights: inputs.kappa.to_vec(),
            bandwidths: inputs.bandwidths.to_vec(),
            a_star,
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ConstantAlpha;

impl ProductivityStrategy for ConstantAlpha {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn code(&self) -> char {
        'C'
    }
    fn estimate(&self, inputs: AlphaInputs<'_>) -> Result<AlphaSurface> {
        Ok(AlphaSurface::Constant {
            a_star: a_star(&inputs)?,
        })
    }
}

/// Name-keyed collections of strategies.
#[derive(Debug, Clone)]
pub struct Registry {
    triggering: BTreeMap<String, Arc<dyn TriggeringEstimator>>,
    productivity: BTreeMap<String, Arc<dyn ProductivityStrategy>>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            triggering: BTreeMap::new(),
            productivity: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        r.register_triggering(Arc::new(NonSeparableKde));
        r.register_triggering(Arc::new(SeparableKde));
        r.register_productivity(Arc::new(VaryingAlpha));
        r.register_productivity(Arc::new(ConstantAlpha));
        r
    }

    pub fn register_triggering(&mut self, s: Arc<dyn TriggeringEstimator>) {
        self.triggering.insert(s.name().to_string(), s);
    }

    pub fn register_productivity(&mut self, s: Arc<dyn ProductivityStrategy>) {
        self.productivity.insert(s.name().to_string(), s);
    }

    /// Lookup by registered name or one-letter code, case-insensitive.
    pub fn triggering(&self, key: &str) -> Result<Arc<dyn TriggeringEstimator>> {
        find(&self.triggering, key, |s| s.code())
    }

    pub fn productivity(&self, key: &str) -> Result<Arc<dyn ProductivityStrategy>> {
        find(&self.productivity, key, |s| s.code())
    }

    pub fn triggering_names(&self) -> Vec<&str> {
        self.triggering.keys().map(String::as_str).collect()
    }

    pub fn productivity_names(&self) -> Vec<&str> {
        self.productivity.keys().map(String::as_str).collect()
    }
}

fn find<T: ?Sized>(map: &BTreeMap<String, Arc<T>>, key: &str, code: impl Fn(&T) -> char) -> Result<Arc<T>> {
    let lower = key.to_ascii_lowercase();
    if let Some(s) = map.get(&lower) {
        return Ok(s.clone());
    }
    let mut chars = key.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(s) = map.values().find(|s| code(s).eq_ignore_ascii_case(&c)) {
            return Ok(s.clone());
        }
    }
    Err(EtasError::UnknownStrategy(key.to_string()))
}

/// Model family label such as `VN-3:1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelFamily {
    pub productivity: char,
    pub triggering: char,
    pub eta: f64,
}

impl ModelFamily {
    pub fn new(productivity: char, triggering: char, eta: f64) -> Result<Self> {
        let productivity = productivity.to_ascii_uppercase();
        let triggering = triggering.to_ascii_uppercase();
        if !matches!(productivity, 'V' | 'C') {
            return Err(EtasError::UnknownStrategy(productivity.to_string()));
        }
        if !matches!(triggering, 'N' | 'S') {
            return Err(EtasError::UnknownStrategy(triggering.to_string()));
        }
        if !(eta >= 1.0) || !eta.is_finite() {
            return Err(EtasError::InvalidParameter(format!("eta must be >= 1, got {eta}")));
        }
        Ok(ModelFamily {
            productivity,
            triggering,
            eta,
        })
    }

    pub fn varying_alpha(&self) -> bool {
        self.productivity == 'V'
    }

    pub fn separable(&self) -> bool {
        self.triggering == 'S'
    }
}

impl Default for ModelFamily {
    fn default() -> Self {
        ModelFamily {
            productivity: 'V',
            triggering: 'N',
            eta: 1.0,
        }
    }
}

impl FromStr for ModelFamily {
    type Err = EtasError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EtasError::Config(format!("model family `{s}` is not of the form XY-e:1"));
        let (letters, ratio) = s.trim().split_once('-').ok_or_else(bad)?;
        let mut it = letters.chars();
        let (p, t) = match (it.next(), it.next(), it.next()) {
            (Some(p), Some(t), None) => (p, t),
            _ => return Err(bad()),
        };
        let (e, one) = ratio.split_once(':').ok_or_else(bad)?;
        if one.trim() != "1" {
            return Err(bad());
        }
        let eta: f64 = e.trim().parse().map_err(|_| bad())?;
        ModelFamily::new(p, t, eta)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}-{}:1", self.productivity, self.triggering, self.eta)
    }
}

impl TryFrom<String> for ModelFamily {
    type Error = EtasError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelFamily> for String {
    fn from(f: ModelFamily) -> String {
        f.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_family() {
        let f: ModelFamily = "vn-3:1".parse().unwrap();
        assert_eq!(f, ModelFamily::new('V', 'N', 3.0).unwrap());
        assert_eq!(f.to_string(), "VN-3:1");
        let g: ModelFamily = "CS-1.5:1".parse().unwrap();
        assert!(g.separable() && !g.varying_alpha());
        for bad in ["VN", "XN-1:1", "VN-0.5:1", "VN-2:3", "VNS-1:1"] {
            assert!(bad.parse::<ModelFamily>().is_err(), "{bad}");
        }
    }

    #[test]
    fn registry_lookup_by_name_and_code() {
        let r = Registry::builtin();
        assert_eq!(r.triggering("N").unwrap().name(), "nonseparable");
        assert_eq!(r.triggering("separable").unwrap().code(), 'S');
        assert_eq!(r.productivity("c").unwrap().name(), "constant");
        assert!(matches!(r.productivity("X"), Err(EtasError::UnknownStrategy(_))));
    }

    #[test]
    fn alpha_is_one_when_productivities_match() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (2.0, -1.0)];
        let r = [0.5, 1.5, 2.0];
        let inputs = AlphaInputs {
            epicenters: &pts,
            responses: &r,
            kappa: &r,
            bandwidths: &[0.5, 0.5, 0.5],
        };
        let s = VaryingAlpha.estimate(inputs).unwrap();
        assert_eq!(s.a_star(), 1.0);
        for q in [(0.0, 0.0), (0.7, 0.1), (3.0, 3.0)] {
            assert!((s.eval(q.0, q.1).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.eval(1e4, 0.0), None);
        assert_eq!(s.eval_or_one(1e4, 0.0), 1.0);
    }

    #[test]
    fn alpha_matches_direct_sums() {
        let pts = [(0.0, 0.0), (0.2, 0.1), (3.0, 0.0), (3.1, 0.3)];
        let r = [2.0, 2.2, 0.5, 0.4];
        let k = [1.0, 1.1, 1.0, 0.9];
        let h = [0.3, 0.4, 0.35, 0.3];
        let s = VaryingAlpha
            .estimate(AlphaInputs {
                epicenters: &pts,
                responses: &r,
                kappa: &k,
                bandwidths: &h,
            })
            .unwrap();
        let a_star = 5.1 / 4.0;
        assert!((s.a_star() - a_star).abs() < 1e-15);
        for q in [(0.1, 0.0), (3.0, 0.1), (1.5, 0.0)] {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..4 {
                let (dx, dy) = (q.0 - pts[j].0, q.1 - pts[j].1);
                let g = (-(dx * dx + dy * dy) / (2.0 * h[j] * h[j])).exp() / (2.0 * std::f64::consts::PI * h[j] * h[j]);
                num += r[j] * g;
                den += k[j] * g;
            }
            let oracle = num / den / a_star;
            assert!((s.eval(q.0, q.1).unwrap() - oracle).abs() < 1e-12 * oracle);
        }
        assert!(s.eval(0.1, 0.0).unwrap() > 1.0);
        assert!(s.eval(3.0, 0.1).unwrap() < 1.0);
    }
}
