//! Gaussian kernel estimators: fixed and adaptive weighted KDE, Abramson
//! square-root bandwidths, k-nearest-neighbour bandwidths with
//! leave-one-out selection of k, and linearly binned KDE on regular grids.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EtasError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Truncation radius of the discretized kernel in the binned estimator, in
/// bandwidths.
pub const BINNED_TRUNCATION: f64 = 6.0;

#[inline]
pub fn gaussian_kernel_1d(d: f64, h: f64) -> f64 {
    let z = d / h;
    INV_SQRT_2PI * (-0.5 * z * z).exp() / h
}

/// `h^-2 phi(dx/h) phi(dy/h)`.
#[inline]
pub fn gaussian_kernel_2d(dx: f64, dy: f64, h: f64) -> f64 {
    let inv = 1.0 / (h * h);
    (-0.5 * (dx * dx + dy * dy) * inv).exp() * inv / (2.0 * PI)
}

/// Per-point bandwidths from the Abramson square-root rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveBandwidths {
    pub h0: f64,
    pub per_point_h: Vec<f64>,
}

impl AdaptiveBandwidths {
    /// One shared bandwidth for every point.
    pub fn fixed(h: f64, n: usize) -> Self {
        AdaptiveBandwidths {
            h0: h,
            per_point_h: vec![h; n],
        }
    }

    pub fn geometric_mean(&self) -> f64 {
        let n = self.per_point_h.len() as f64;
        (self.per_point_h.iter().map(|h| h.ln()).sum::<f64>() / n).exp()
    }
}

/// Weighted fixed-bandwidth pilot density at each sample point, then
/// `h_i = h0 f0(p_i)^{-1/2} / gamma` with `gamma` the geometric mean of the
/// `f0(p_i)^{-1/2}`. The returned bandwidths have geometric mean `h0`.
pub fn abramson_bandwidths(
    points: &[(f64, f64)],
    weights: &[f64],
    h0: f64,
) -> Result<AdaptiveBandwidths> {
    if !(h0 > 0.0) || !h0.is_finite() {
        return Err(EtasError::InvalidParameter(format!(
            "pilot bandwidth must be positive, got {h0}"
        )));
    }
    if points.len() != weights.len() {
        return Err(EtasError::InvalidParameter(
            "points and weights differ in length".into(),
        ));
    }
    if points.is_empty() {
        return Err(EtasError::InsufficientData("empty sample".into()));
    }
    let w_sum: f64 = weights.iter().sum();
    if !(w_sum > 0.0) {
        return Err(EtasError::Degenerate("pilot weights sum to zero".into()));
    }
    let pilot: Vec<f64> = points
        .par_iter()
        .map(|&(x, y)| {
            points
                .iter()
                .zip(weights)
                .map(|(p, w)| w * gaussian_kernel_2d(x - p.0, y - p.1, h0))
                .sum::<f64>()
                / w_sum
        })
        .collect();
    if let Some(i) = pilot.iter().position(|f| !(*f > 0.0)) {
        return Err(EtasError::Invariant(format!(
            "pilot density vanishes at sample point {i}"
        )));
    }
    let log_gamma = pilot.iter().map(|f| -0.5 * f.ln()).sum::<f64>() / pilot.len() as f64;
    let per_point_h = pilot
        .iter()
        .map(|f| h0 * (-0.5 * f.ln() - log_gamma).exp())
        .collect();
    Ok(AdaptiveBandwidths { h0, per_point_h })
}

/// `sum_i w_i G_{h_i}(q - p_i)`. Integrates to `sum_i w_i` over the plane.
pub fn weighted_kde_2d_adaptive(
    points: &[(f64, f64)],
    weights: &[f64],
    bandwidths: &[f64],
    query: (f64, f64),
) -> f64 {
    debug_assert_eq!(points.len(), weights.len());
    debug_assert_eq!(points.len(), bandwidths.len());
    points
        .iter()
        .zip(weights)
        .zip(bandwidths)
        .filter(|((_, w), _)| **w != 0.0)
        .map(|((p, w), h)| w * gaussian_kernel_2d(query.0 - p.0, query.1 - p.1, *h))
        .sum()
}

/// Default bandwidth used when every neighbour ties with a point.
pub const KNN_FLOOR: f64 = 1e-3;

/// Distance from each value to its k-th nearest neighbour among the others.
/// A zero distance (ties) is replaced by the smallest positive neighbour
/// distance, or `floor` when all values coincide.
pub fn knn_bandwidth_1d(points: &[f64], k: usize, floor: f64) -> Result<Vec<f64>> {
    let n = points.len();
    if k < 1 || k >= n {
        return Err(EtasError::InvalidParameter(format!(
            "k must satisfy 1 <= k < {n}, got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| points[i]).collect();

    let mut out = vec![0.0; n];
    for (pos, &idx) in order.iter().enumerate() {
        let v = sorted[pos];
        let (mut l, mut r) = (pos as isize - 1, pos + 1);
        let mut dist = 0.0;
        for _ in 0..k {
            let dl = if l >= 0 { v - sorted[l as usize] } else { f64::INFINITY };
            let dr = if r < n { sorted[r] - v } else { f64::INFINITY };
            if dl <= dr {
                dist = dl;
                l -= 1;
            } else {
                dist = dr;
                r += 1;
            }
        }
        if dist == 0.0 {
            let left = sorted[..pos].iter().rev().find(|&&s| s != v).map(|s| v - s);
            let right = sorted[pos + 1..].iter().find(|&&s| s != v).map(|s| s - v);
            dist = match (left, right) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => floor,
            };
        }
        out[idx] = dist;
    }
    Ok(out)
}

/// Nadaraya-Watson smooth `sum_i y_i G_{h_i}(x - x_i) / sum_i G_{h_i}(x - x_i)`
/// with per-support bandwidths. Returns `None` if the denominator underflows.
pub fn nadaraya_watson(support: &[f64], responses: &[f64], bandwidths: &[f64], x: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((s, y), h) in support.iter().zip(responses).zip(bandwidths) {
        let g = gaussian_kernel_1d(x - s, *h);
        num += y * g;
        den += g;
    }
    (den > 0.0).then(|| num / den)
}

/// Outcome of leave-one-out selection of the neighbour count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnSelection {
    pub k: usize,
    /// `(k, sum of squared leave-one-out errors)` for every candidate.
    pub cv_errors: Vec<(usize, f64)>,
}

/// Leave-one-out squared error of the Nadaraya-Watson smooth with k-NN
/// bandwidths. A point whose leave-one-out denominator vanishes is predicted
/// by the global mean response.
pub fn knn_loo_error(magnitudes: &[f64], responses: &[f64], k: usize, floor: f64) -> Result<f64> {
    let h = knn_bandwidth_1d(magnitudes, k, floor)?;
    let mean = responses.iter().sum::<f64>() / responses.len() as f64;
    let err = (0..magnitudes.len())
        .into_par_iter()
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..magnitudes.len() {
                if i == j {
                    continue;
                }
                let g = gaussian_kernel_1d(magnitudes[j] - magnitudes[i], h[i]);
                num += responses[i] * g;
                den += g;
            }
            let pred = if den > 0.0 { num / den } else { mean };
            (responses[j] - pred).powi(2)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(err)
}

/// Chooses the k in `k_grid` minimizing the leave-one-out least-squares
/// criterion; ties go to the smallest k.
pub fn select_knn_k(
    magnitudes: &[f64],
    responses: &[f64],
    k_grid: &[usize],
    floor: f64,
) -> Result<KnnSelection> {
    if k_grid.is_empty() {
        return Err(EtasError::InvalidParameter("empty k grid".into()));
    }
    if magnitudes.len() != responses.len() {
        return Err(EtasError::InvalidParameter(
            "magnitudes and responses differ in length".into(),
        ));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let scale: f64 = responses.iter().map(|r| r * r).sum::<f64>();
    let tol = 1e-12 * scale;
    let mut cv_errors = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for &k in &grid {
        let err = knn_loo_error(magnitudes, responses, k, floor)?;
        cv_errors.push((k, err));
        match best {
            Some((_, b)) if err >= b - tol => {}
            _ => best = Some((k, err)),
        }
    }
    Ok(KnnSelection {
        k: best.map(|b| b.0).unwrap_or(grid[0]),
        cv_errors,
    })
}

/// Equally spaced nodes `min, min + step, ..., max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 || !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(EtasError::InvalidParameter(format!(
                "grid axis [{min}, {max}] with {nodes} nodes is invalid"
            )));
        }
        Ok(GridAxis { min, max, nodes })
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.min + k as f64 * self.step()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    /// Left node index and fractional offset toward the right node.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let r = (x - self.min) / self.step();
        let i = (r.floor() as usize).min(self.nodes - 2);
        (i, (r - i as f64).clamp(0.0, 1.0))
    }

    /// Trapezoid weight of node `k`.
    fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.nodes - 1 {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    fn kernel_taps(&self, h: f64) -> Vec<f64> {
        let step = self.step();
        let half = ((BINNED_TRUNCATION * h) / step).floor() as usize;
        let half = half.min(self.nodes - 1);
        (0..=half).map(|k| gaussian_kernel_1d(k as f64 * step, h)).collect()
    }
}

/// Node masses from linear binning onto a 2-D grid, row-major in x.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedGrid2D {
    pub x: GridAxis,
    pub y: GridAxis,
    pub masses: Vec<f64>,
}

impl BinnedGrid2D {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Splits each weighted point among its four surrounding nodes.
pub fn linear_binning_2d(
    points: &[(f64, f64)],
    weights: &[f64],
    x: GridAxis,
    y: GridAxis,
) -> Result<BinnedGrid2D> {
    let mut masses = vec![0.0; x.nodes * y.nodes];
    for (p, &w) in points.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if !x.contains(p.0) || !y.contains(p.1) {
            return Err(EtasError::Coverage(format!(
                "point ({}, {}) outside [{}, {}] x [{}, {}]",
                p.0, p.1, x.min, x.max, y.min, y.max
            )));
        }
        let (i, fx) = x.locate(p.0);
        let (j, fy) = y.locate(p.1);
        let ny = y.nodes;
        masses[i * ny + j] += w * (1.0 - fx) * (1.0 - fy);
        masses[(i + 1) * ny + j] += w * fx * (1.0 - fy);
        masses[i * ny + j + 1] += w * (1.0 - fx) * fy;
        masses[(i + 1) * ny + j + 1] += w * fx * fy;
    }
    Ok(BinnedGrid2D { x, y, masses })
}

fn convolve_line(input: &[f64], taps: &[f64], out: &mut [f64]) {
    let n = input.len();
    let half = taps.len() - 1;
    for (k, o) in out.iter_mut().enumerate() {
        let lo = k.saturating_sub(half);
        let hi = (k + half).min(n - 1);
        let mut acc = 0.0;
        for (m, v) in input.iter().enumerate().take(hi + 1).skip(lo) {
            acc += v * taps[k.abs_diff(m)];
        }
        *o = acc;
    }
}

/// Density on a regular 2-D grid, evaluated elsewhere by bilinear
/// interpolation and zero outside the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity2D {
    pub x: GridAxis,
    pub y: GridAxis,
    /// Row-major in x: `values[ix * y.nodes + iy]`.
    pub values: Vec<f64>,
}

impl GridDensity2D {
    pub fn value_at_node(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.y.nodes + iy]
    }

    #[inline]
    pub fn eval(&self, px: f64, py: f64) -> f64 {
        if !self.x.contains(px) || !self.y.contains(py) {
            return 0.0;
        }
        let (i, fx) = self.x.locate(px);
        let (j, fy) = self.y.locate(py);
        let ny = self.y.nodes;
        let v00 = self.values[i * ny + j];
        let v10 = self.values[(i + 1) * ny + j];
        let v01 = self.values[i * ny + j + 1];
        let v11 = self.values[(i + 1) * ny + j + 1];
        (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)
    }

    /// Trapezoidal integral over the grid (exact for the bilinear interpolant).
    pub fn integral(&self) -> f64 {
        let ny = self.y.nodes;
        let mut total = 0.0;
        for ix in 0..self.x.nodes {
            let wx = self.x.trapezoid_weight(ix);
            for iy in 0..ny {
                total += wx * self.y.trapezoid_weight(iy) * self.values[ix * ny + iy];
            }
        }
        total
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Writes `x,y,value` for every node.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "value"])?;
        for ix in 0..self.x.nodes {
            for iy in 0..self.y.nodes {
                w.write_record([
                    self.x.node(ix).to_string(),
                    self.y.node(iy).to_string(),
                    self.value_at_node(ix, iy).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| EtasError::io("<grid>", e))?;
        Ok(())
    }

    /// Integral over `y` at every x node (trapezoid rule).
    pub fn marginal_x(&self) -> Vec<f64> {
        let ny = self.y.nodes;
        (0..self.x.nodes)
            .map(|ix| {
                (0..ny)
                    .map(|iy| self.y.trapezoid_weight(iy) * self.values[ix * ny + iy])
                    .sum()
            })
            .collect()
    }

    /// Integral over `x` at every y node (trapezoid rule).
    pub fn marginal_y(&self) -> Vec<f64> {
        let ny = self.y.nodes;
        (0..ny)
            .map(|iy| {
                (0..self.x.nodes)
                    .map(|ix| self.x.trapezoid_weight(ix) * self.values[ix * ny + iy])
                    .sum()
            })
            .collect()
    }
}

/// Linear binning, separable convolution with a Gaussian truncated at
/// [`BINNED_TRUNCATION`] bandwidths, then normalization so the trapezoidal
/// integral over the grid is 1. Returns the density and the raw integral
/// before normalization (the mass captured by the grid relative to the total
/// input weight).
pub fn binned_kde_2d_with_mass(
    points: &[(f64, f64)],
    weights: &[f64],
    x: GridAxis,
    y: GridAxis,
    h: f64,
) -> Result<(GridDensity2D, f64)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(EtasError::InvalidParameter(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    if points.len() != weights.len() {
        return Err(EtasError::InvalidParameter(
            "points and weights differ in length".into(),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(EtasError::InvalidParameter(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(EtasError::Degenerate("total weight is zero".into()));
    }
    let binned = linear_binning_2d(points, weights, x, y)?;
    let (nx, ny) = (x.nodes, y.nodes);
    let tx = x.kernel_taps(h);
    let ty = y.kernel_taps(h);

    // along y within each x row
    let mut stage = vec![0.0; nx * ny];
    stage
        .par_chunks_mut(ny)
        .zip(binned.masses.par_chunks(ny))
        .for_each(|(out, row)| convolve_line(row, &ty, out));
    // along x for each y column
    let columns: Vec<Vec<f64>> = (0..ny)
        .into_par_iter()
        .map(|iy| {
            let col: Vec<f64> = (0..nx).map(|ix| stage[ix * ny + iy]).collect();
            let mut out = vec![0.0; nx];
            convolve_line(&col, &tx, &mut out);
            out
        })
        .collect();
    let mut values = vec![0.0; nx * ny];
    for (iy, col) in columns.iter().enumerate() {
        for (ix, v) in col.iter().enumerate() {
            values[ix * ny + iy] = v / total;
        }
    }
    let mut density = GridDensity2D { x, y, values };
    let raw = density.integral();
    if !(raw > 0.0) {
        return Err(EtasError::Degenerate(
            "binned density has no mass on the grid".into(),
        ));
    }
    density.values.iter_mut().for_each(|v| *v /= raw);
    Ok((density, raw))
}

pub fn binned_kde_2d(
    points: &[(f64, f64)],
    weights: &[f64],
    x: GridAxis,
    y: GridAxis,
    h: f64,
) -> Result<GridDensity2D> {
    binned_kde_2d_with_mass(points, weights, x, y, h).map(|(d, _)| d)
}

/// Density on a regular 1-D grid with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity1D {
    pub axis: GridAxis,
    pub values: Vec<f64>,
}

impl GridDensity1D {
    #[inline]
    pub fn eval(&self, p: f64) -> f64 {
        if !self.axis.contains(p) {
            return 0.0;
        }
        let (i, f) = self.axis.locate(p);
        (1.0 - f) * self.values[i] + f * self.values[i + 1]
    }

    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.axis.trapezoid_weight(k) * v)
            .sum()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// One-dimensional counterpart of [`binned_kde_2d_with_mass`].
pub fn binned_kde_1d_with_mass(
    points: &[f64],
    weights: &[f64],
    axis: GridAxis,
    h: f64,
) -> Result<(GridDensity1D, f64)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(EtasError::InvalidParameter(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(EtasError::Degenerate("total weight is zero".into()));
    }
    let mut masses = vec![0.0; axis.nodes];
    for (&p, &w) in points.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if !axis.contains(p) {
            return Err(EtasError::Coverage(format!(
                "point {p} outside [{}, {}]",
                axis.min, axis.max
            )));
        }
        let (i, f) = axis.locate(p);
        masses[i] += w * (1.0 - f);
        masses[i + 1] += w * f;
    }
    let taps = axis.kernel_taps(h);
    let mut values = vec![0.0; axis.nodes];
    convolve_line(&masses, &taps, &mut values);
    values.iter_mut().for_each(|v| *v /= total);
    let mut density = GridDensity1D { axis, values };
    let raw = density.integral();
    if !(raw > 0.0) {
        return Err(EtasError::Degenerate(
            "binned density has no mass on the grid".into(),
        ));
    }
    density.values.iter_mut().for_each(|v| *v /= raw);
    Ok((density, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values_at_origin() {
        assert!((gaussian_kernel_2d(0.0, 0.0, 1.0) - 0.159_154_943_091_895_3).abs() < 1e-15);
        assert!((gaussian_kernel_2d(0.0, 0.0, 0.5) - std::f64::consts::FRAC_2_PI).abs() < 1e-15);
    }

    #[test]
    fn kernel_integrates_to_one() {
        let h = 0.7;
        let n = 400;
        let step = 16.0 * h / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -8.0 * h + (i as f64 + 0.5) * step;
                let y = -8.0 * h + (j as f64 + 0.5) * step;
                total += gaussian_kernel_2d(x, y, h) * step * step;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn abramson_constant_pilot_gives_h0() {
        // four points on the corners of a square: the pilot is equal at all
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let bw = abramson_bandwidths(&pts, &[1.0; 4], 0.5).unwrap();
        for h in &bw.per_point_h {
            assert!((h - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn abramson_dense_cluster_gets_smaller_bandwidths() {
        let mut pts = Vec::new();
        for k in 0..20 {
            pts.push((0.01 * k as f64, 0.0));
        }
        for k in 0..4 {
            pts.push((10.0 + 0.01 * k as f64, 0.0));
        }
        let w = vec![1.0; pts.len()];
        let h0 = 0.5;
        let bw = abramson_bandwidths(&pts, &w, h0).unwrap();
        // direct per-point oracle
        let f0: Vec<f64> = pts
            .iter()
            .map(|q| {
                pts.iter()
                    .map(|p| gaussian_kernel_2d(q.0 - p.0, q.1 - p.1, h0))
                    .sum::<f64>()
                    / pts.len() as f64
            })
            .collect();
        let gamma = (f0.iter().map(|f| f.powf(-0.5).ln()).sum::<f64>() / f0.len() as f64).exp();
        for (h, f) in bw.per_point_h.iter().zip(&f0) {
            assert!((h - h0 * f.powf(-0.5) / gamma).abs() < 1e-12);
        }
        assert!(bw.per_point_h[0] < bw.per_point_h[20]);
        assert!((bw.geometric_mean() - h0).abs() < 1e-10);
    }

    #[test]
    fn adaptive_kde_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.random(), rng.random())).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let h: Vec<f64> = (0..5).map(|_| 0.1 + rng.random::<f64>()).collect();
        for _ in 0..20 {
            let q = (rng.random::<f64>(), rng.random::<f64>());
            let mut naive = 0.0;
            for i in 0..5 {
                let (dx, dy) = (q.0 - pts[i].0, q.1 - pts[i].1);
                naive += w[i] * (-(dx * dx + dy * dy) / (2.0 * h[i] * h[i])).exp()
                    / (2.0 * PI * h[i] * h[i]);
            }
            let got = weighted_kde_2d_adaptive(&pts, &w, &h, q);
            assert!((got - naive).abs() < 1e-12);
        }
        assert_eq!(weighted_kde_2d_adaptive(&pts, &[0.0; 5], &h, (0.5, 0.5)), 0.0);
    }

    #[test]
    fn knn_examples() {
        let h = knn_bandwidth_1d(&[5.0, 5.1, 5.3], 1, KNN_FLOOR).unwrap();
        let expected = [0.1, 0.1, 0.2];
        for (a, b) in h.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let h = knn_bandwidth_1d(&[4.0; 5], 2, KNN_FLOOR).unwrap();
        assert!(h.iter().all(|&v| v == KNN_FLOOR));
        assert!(knn_bandwidth_1d(&[1.0, 2.0], 2, KNN_FLOOR).is_err());
        assert!(knn_bandwidth_1d(&[1.0, 2.0], 0, KNN_FLOOR).is_err());
    }

    #[test]
    fn knn_ties_use_smallest_positive_gap() {
        let h = knn_bandwidth_1d(&[5.0, 5.0, 5.0, 5.4], 1, KNN_FLOOR).unwrap();
        assert!((h[0] - 0.4).abs() < 1e-12);
        assert!((h[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mags: Vec<f64> = (0..50).map(|_| 3.0 + rng.random::<f64>() * 3.0).collect();
        let h = knn_bandwidth_1d(&mags, 7, KNN_FLOOR).unwrap();
        for (j, m) in mags.iter().enumerate() {
            let mut d: Vec<f64> = mags
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, x)| (x - m).abs())
                .collect();
            d.sort_by(f64::total_cmp);
            assert_eq!(h[j], d[6]);
        }
    }

    #[test]
    fn constant_responses_pick_smallest_k() {
        let mags: Vec<f64> = (0..30).map(|i| 3.0 + 0.1 * i as f64).collect();
        let resp = vec![0.7; 30];
        let sel = select_knn_k(&mags, &resp, &[8, 3, 5], KNN_FLOOR).unwrap();
        assert_eq!(sel.k, 3);
        let sel = select_knn_k(&mags, &resp, &[3], KNN_FLOOR).unwrap();
        assert_eq!(sel.k, 3);
    }

    #[test]
    fn loo_penalizes_oversmoothing() {
        let mags: Vec<f64> = (0..60).map(|i| 3.0 + 0.05 * i as f64).collect();
        let resp: Vec<f64> = mags.iter().map(|m| m.exp()).collect();
        let n = mags.len();
        // naive leave-one-out oracle
        let oracle = |k: usize| {
            let mut total = 0.0;
            for j in 0..n {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut d: Vec<f64> = (0..n)
                        .filter(|&l| l != i)
                        .map(|l| (mags[l] - mags[i]).abs())
                        .collect();
                    d.sort_by(f64::total_cmp);
                    let h = d[k - 1];
                    let z = (mags[j] - mags[i]) / h;
                    let g = (-0.5 * z * z).exp() / (h * (2.0 * PI).sqrt());
                    num += resp[i] * g;
                    den += g;
                }
                total += (resp[j] - num / den).powi(2);
            }
            total
        };
        let moderate = knn_loo_error(&mags, &resp, 4, KNN_FLOOR).unwrap();
        let wide = knn_loo_error(&mags, &resp, n - 1, KNN_FLOOR).unwrap();
        assert!((moderate - oracle(4)).abs() < 1e-9 * oracle(4));
        assert!((wide - oracle(n - 1)).abs() < 1e-9 * oracle(n - 1));
        assert!(wide > moderate);
    }

    #[test]
    fn linear_binning_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..300).map(|_| (rng.random(), rng.random())).collect();
        let w: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let ax = GridAxis::new(0.0, 1.0, 33).unwrap();
        let b = linear_binning_2d(&pts, &w, ax, ax).unwrap();
        let total: f64 = w.iter().sum();
        assert!((b.total_mass() - total).abs() < 1e-9 * total);
    }

    #[test]
    fn delta_on_node_gives_gaussian_peak() {
        let h = 0.2;
        let ax = GridAxis::new(-2.0, 2.0, 201).unwrap();
        let d = binned_kde_2d(&[(0.0, 0.0)], &[1.0], ax, ax, h).unwrap();
        let peak = d.value_at_node(100, 100);
        assert!((peak - 1.0 / (2.0 * PI * h * h)).abs() < 1e-6, "{peak}");
    }

    #[test]
    fn zero_weight_and_coverage_errors() {
        let ax = GridAxis::new(0.0, 1.0, 16).unwrap();
        assert!(matches!(
            binned_kde_2d(&[(0.5, 0.5)], &[0.0], ax, ax, 0.1),
            Err(EtasError::Degenerate(_))
        ));
        assert!(matches!(
            binned_kde_2d(&[(1.5, 0.5)], &[1.0], ax, ax, 0.1),
            Err(EtasError::Coverage(_))
        ));
    }

    #[test]
    fn binned_error_shrinks_with_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.random::<f64>() * 3.0, rng.random::<f64>() * 2.0))
            .collect();
        let w: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let h = 0.2;
        let total: f64 = w.iter().sum();
        let direct = |q: (f64, f64)| {
            pts.iter()
                .zip(&w)
                .map(|(p, wi)| wi * gaussian_kernel_2d(q.0 - p.0, q.1 - p.1, h))
                .sum::<f64>()
                / total
        };
        let queries: Vec<(f64, f64)> = (0..50)
            .map(|_| (rng.random::<f64>() * 3.0, rng.random::<f64>() * 2.0))
            .collect();
        let mut prev = f64::INFINITY;
        for n in [64, 128, 256] {
            let x = GridAxis::new(-6.0 * h, 3.0 + 6.0 * h, n).unwrap();
            let y = GridAxis::new(-6.0 * h, 2.0 + 6.0 * h, n).unwrap();
            let d = binned_kde_2d(&pts, &w, x, y, h).unwrap();
            let err = queries
                .iter()
                .map(|q| (d.eval(q.0, q.1) - direct(*q)).abs())
                .fold(0.0, f64::max);
            assert!(err < prev, "n={n}: {err} !< {prev}");
            prev = err;
        }
    }

    #[test]
    fn binned_1d_normalizes() {
        let ax = GridAxis::new(-3.0, 3.0, 301).unwrap();
        let (d, raw) = binned_kde_1d_with_mass(&[0.0, 0.3], &[1.0, 2.0], ax, 0.25).unwrap();
        assert!((d.integral() - 1.0).abs() < 1e-12);
        assert!((raw - 1.0).abs() < 1e-6);
    }
}
