//! Anisotropic spatial metric and plate-boundary orientation.
//!
//! The shape matrix is `S = R(theta) diag(eta, 1/eta) R(theta)^T`. It has unit
//! determinant, so measuring spatial lags with the induced Mahalanobis
//! distance keeps the elliptical polar reduction of the triggering density
//! normalized.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::catalog::BoundaryPolyline;
use crate::error::{EtasError, Result};

/// Axial ratio `eta >= 1` and major-axis orientation `theta` (radians,
/// counterclockwise from east, canonicalized to `[0, pi)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyParams {
    eta: f64,
    theta: f64,
}

impl AnisotropyParams {
    pub fn new(eta: f64, theta: f64) -> Result<Self> {
        if !eta.is_finite() || eta < 1.0 {
            return Err(EtasError::InvalidParameter(format!(
                "axial ratio must be finite and >= 1, got {eta}"
            )));
        }
        if !theta.is_finite() {
            return Err(EtasError::InvalidParameter(format!(
                "orientation must be finite, got {theta}"
            )));
        }
        Ok(AnisotropyParams {
            eta,
            theta: canonical_angle(theta),
        })
    }

    pub fn isotropic() -> Self {
        AnisotropyParams {
            eta: 1.0,
            theta: 0.0,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn metric(&self) -> Metric {
        Metric::new(*self)
    }
}

/// Maps an angle onto `[0, pi)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// `S = R(theta) diag(eta, 1/eta) R(theta)^T`, row-major.
pub fn shape_matrix(params: &AnisotropyParams) -> [[f64; 2]; 2] {
    let (s, c) = params.theta.sin_cos();
    let (a, b) = (params.eta, 1.0 / params.eta);
    [
        [a * c * c + b * s * s, (a - b) * s * c],
        [(a - b) * s * c, a * s * s + b * c * c],
    ]
}

/// Precomputed Mahalanobis metric for fixed anisotropy parameters.
#[derive(Debug, Clone, Copy)]
pub struct Metric {
    cos: f64,
    sin: f64,
    eta: f64,
}

impl Metric {
    pub fn new(params: AnisotropyParams) -> Self {
        let (sin, cos) = params.theta.sin_cos();
        Metric {
            cos,
            sin,
            eta: params.eta,
        }
    }

    /// `sqrt(v^T S^-1 v)`. In the frame rotated by `-theta` the inverse shape
    /// matrix is `diag(1/eta, eta)`.
    #[inline]
    pub fn lag(&self, dx: f64, dy: f64) -> f64 {
        if self.eta == 1.0 {
            return dx.hypot(dy);
        }
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (u * u / self.eta + v * v * self.eta).sqrt()
    }

    /// Physical offset whose whitened coordinates are `(a, b)`; applies
    /// `S^{1/2}` so that `lag(offset(a, b)) == hypot(a, b)`.
    #[inline]
    pub fn offset(&self, a: f64, b: f64) -> (f64, f64) {
        let root = self.eta.sqrt();
        let u = a * root;
        let v = b / root;
        (self.cos * u - self.sin * v, self.sin * u + self.cos * v)
    }
}

pub fn mahalanobis_lag(dx: f64, dy: f64, params: &AnisotropyParams) -> f64 {
    Metric::new(*params).lag(dx, dy)
}

/// How the boundary orientation was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMethod {
    WeightedRegression,
    PrincipalAxis,
}

/// Boundary orientation with the regression diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta_rad: f64,
    pub theta_deg: f64,
    pub method: ThetaMethod,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub n_segments: usize,
    pub weights: Vec<f64>,
}

/// Slopes steeper than this switch to the principal-axis fallback.
const MAX_REGRESSION_SLOPE_DEG: f64 = 85.0;

/// Length-weighted regression of segment midpoints (latitude on longitude).
/// Near-vertical or degenerate fits fall back to the principal axis of the
/// weighted midpoint covariance.
pub fn estimate_theta(boundary: &BoundaryPolyline, subducting_only: bool) -> Result<ThetaEstimate> {
    let segments: Vec<_> = boundary
        .segments
        .iter()
        .filter(|s| !subducting_only || s.subducting)
        .collect();
    if segments.len() < 2 {
        return Err(EtasError::InsufficientData(format!(
            "orientation needs at least 2 segments, got {}",
            segments.len()
        )));
    }
    let points: Vec<(f64, f64)> = segments.iter().map(|s| s.midpoint()).collect();
    let weights: Vec<f64> = segments.iter().map(|s| s.length()).collect();
    let mut est = orientation_from_points(&points, &weights)?;
    est.n_segments = segments.len();
    Ok(est)
}

/// Weighted orientation of a point set; exposed for callers that already
/// hold midpoints and weights.
pub fn orientation_from_points(points: &[(f64, f64)], weights: &[f64]) -> Result<ThetaEstimate> {
    if points.len() != weights.len() || points.len() < 2 {
        return Err(EtasError::InsufficientData(
            "orientation needs at least 2 weighted points".into(),
        ));
    }
    let w_sum: f64 = weights.iter().sum();
    if !(w_sum > 0.0) {
        return Err(EtasError::Degenerate("all segment weights are zero".into()));
    }
    let mx = points.iter().zip(weights).map(|(p, w)| w * p.0).sum::<f64>() / w_sum;
    let my = points.iter().zip(weights).map(|(p, w)| w * p.1).sum::<f64>() / w_sum;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (p, w) in points.iter().zip(weights) {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    let max_slope = MAX_REGRESSION_SLOPE_DEG.to_radians().tan();
    let spread = sxx + syy;
    let regression_ok = sxx > 1e-12 * spread.max(f64::MIN_POSITIVE) && (sxy / sxx).abs() <= max_slope;

    let (theta, method, slope, r_squared) = if regression_ok {
        let slope = sxy / sxx;
        let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
        (slope.atan(), ThetaMethod::WeightedRegression, Some(slope), Some(r2))
    } else {
        if !(spread > 0.0) {
            return Err(EtasError::Degenerate("all midpoints coincide".into()));
        }
        let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        (theta, ThetaMethod::PrincipalAxis, None, None)
    };
    let theta = canonical_angle(theta);
    Ok(ThetaEstimate {
        theta_rad: theta,
        theta_deg: theta.to_degrees(),
        method,
        slope,
        r_squared,
        n_segments: points.len(),
        weights: weights.to_vec(),
    })
}
