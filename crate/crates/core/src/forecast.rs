//! Daily grid forecasts, ROC curves with partial AUC over specificity
//! 50-100%, and the stratified-bootstrap comparison of two forecasts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::catalog::Event;
use crate::error::{EtasError, Result};
use crate::intensity::{CellGrid, HawkesComponents, PreparedHistory};

/// Scores and binary labels over `day x cell`, flattened day-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCells {
    pub n_days: usize,
    pub n_cells: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredCells {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(EtasError::Alignment(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(ScoredCells {
            n_days: 1,
            n_cells: scores.len(),
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Scores every cell midpoint at the start of each forecast day, with all
/// events before that instant as history, and labels cells holding at
/// least one event during the day. Day `k` covers `[start + k, start + k + 1)`.
pub fn score_forecast_period<M: HawkesComponents + ?Sized>(
    model: &M,
    events: &[Event],
    grid: &CellGrid,
    start: f64,
    n_days: usize,
) -> Result<ScoredCells> {
    if events.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(EtasError::Precondition("events must be sorted by time".into()));
    }
    let n_cells = grid.len();
    let end = start + n_days as f64;
    let mut labels = vec![false; n_days * n_cells];
    for (i, e) in events.iter().enumerate() {
        if e.t < start || e.t >= end {
            continue;
        }
        let cell = grid.index_of(e.lon, e.lat).ok_or(EtasError::OutsideGrid {
            index: i,
            lon: e.lon,
            lat: e.lat,
        })?;
        let day = ((e.t - start).floor() as usize).min(n_days - 1);
        labels[day * n_cells + cell] = true;
    }
    let prepared = PreparedHistory::new(model, events);
    let scores = (0..n_days * n_cells)
        .into_par_iter()
        .map(|k| {
            let (day, cell) = (k / n_cells, k % n_cells);
            let (lon, lat) = grid.midpoint(cell);
            prepared.intensity(model, lon, lat, start + day as f64)
        })
        .collect();
    Ok(ScoredCells {
        n_days,
        n_cells,
        scores,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// From `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<RocPoint>,
    /// Area under the ROC over false-positive rate `[0, 0.5]`.
    pub pauc: f64,
    pub full_auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RocResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush().map_err(|e| EtasError::io("<roc>", e))?;
        Ok(())
    }
}

/// Upper false-positive rate of the partial-AUC band.
pub const PAUC_MAX_FPR: f64 = 0.5;

/// Scores sorted descending with tie-group ends.
struct Ranking {
    order: Vec<usize>,
    group_ends: Vec<usize>,
}

impl Ranking {
    fn new(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut group_ends = Vec::new();
        for k in 1..order.len() {
            if scores[order[k]] != scores[order[k - 1]] {
                group_ends.push(k);
            }
        }
        group_ends.push(order.len());
        Ranking { order, group_ends }
    }

    /// Areas `(pauc, full)` with optional per-cell multiplicities.
    fn areas(&self, labels: &[bool], counts: Option<&[u32]>) -> (f64, f64) {
        let (mut tot_p, mut tot_n) = (0.0, 0.0);
        for (i, &l) in labels.iter().enumerate() {
            let c = counts.map_or(1.0, |c| c[i] as f64);
            if l {
                tot_p += c;
            } else {
                tot_n += c;
            }
        }
        let (mut tp, mut fp) = (0.0, 0.0);
        let (mut prev_x, mut prev_y) = (0.0, 0.0);
        let (mut full, mut partial) = (0.0, 0.0);
        let mut start = 0;
        for &end in &self.group_ends {
            for &i in &self.order[start..end] {
                let c = counts.map_or(1.0, |c| c[i] as f64);
                if labels[i] {
                    tp += c;
                } else {
                    fp += c;
                }
            }
            start = end;
            let (x, y) = (fp / tot_n, tp / tot_p);
            full += 0.5 * (x - prev_x) * (y + prev_y);
            partial += clipped_trapezoid(prev_x, prev_y, x, y, PAUC_MAX_FPR);
            prev_x = x;
            prev_y = y;
        }
        (partial, full)
    }
}

/// Trapezoid area of the segment restricted to `x <= limit`.
fn clipped_trapezoid(x0: f64, y0: f64, x1: f64, y1: f64, limit: f64) -> f64 {
    if x0 >= limit || x1 <= x0 {
        return 0.0;
    }
    if x1 <= limit {
        return 0.5 * (x1 - x0) * (y0 + y1);
    }
    let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
    0.5 * (limit - x0) * (y0 + y_at)
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EtasError::UndefinedRoc(format!(
            "need both classes, got {pos} positive and {neg} negative cells"
        )));
    }
    Ok((pos, neg))
}

/// ROC by a descending threshold sweep; tied scores move diagonally.
pub fn partial_auc(cells: &ScoredCells) -> Result<RocResult> {
    let (n_pos, n_neg) = class_counts(&cells.labels)?;
    let ranking = Ranking::new(&cells.scores);
    let (pauc, full_auc) = ranking.areas(&cells.labels, None);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut start = 0;
    for &end in &ranking.group_ends {
        for &i in &ranking.order[start..end] {
            if cells.labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            threshold: cells.scores[ranking.order[start]],
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
        start = end;
    }
    Ok(RocResult {
        points,
        pauc,
        full_auc,
        n_pos,
        n_neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub pauc_a: f64,
    pub pauc_b: f64,
    pub difference: f64,
    pub sd: f64,
    pub z: f64,
    pub p_value: f64,
    pub n_boot: usize,
    pub seed: u64,
}

/// One-sided upper tail of the standard normal.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Stratified bootstrap test of `pauc_a > pauc_b`. Positive and negative
/// cells are resampled separately with replacement; replicate `r` draws from
/// stream `r` of a generator seeded with `seed`.
///
/// A bootstrap distribution with no spread around a nonzero difference gives
/// an infinite `z` (p = 0 or 1); no spread and no difference is
/// [`EtasError::DegenerateVariance`].
pub fn bootstrap_compare(a: &ScoredCells, b: &ScoredCells, n_boot: usize, seed: u64) -> Result<BootstrapReport> {
    if a.len() != b.len() || a.labels != b.labels {
        return Err(EtasError::Alignment(
            "score sets differ in size or labels".into(),
        ));
    }
    if n_boot < 2 {
        return Err(EtasError::InvalidParameter("n_boot must be at least 2".into()));
    }
    class_counts(&a.labels)?;
    let ra = Ranking::new(&a.scores);
    let rb = Ranking::new(&b.scores);
    let pauc_a = ra.areas(&a.labels, None).0;
    let pauc_b = rb.areas(&b.labels, None).0;
    let pos: Vec<usize> = (0..a.len()).filter(|&i| a.labels[i]).collect();
    let neg: Vec<usize> = (0..a.len()).filter(|&i| !a.labels[i]).collect();

    let diffs: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut counts = vec![0u32; a.len()];
            for stratum in [&pos, &neg] {
                for _ in 0..stratum.len() {
                    counts[stratum[rng.random_range(0..stratum.len())]] += 1;
                }
            }
            ra.areas(&a.labels, Some(&counts)).0 - rb.areas(&b.labels, Some(&counts)).0
        })
        .collect();
    let mean = diffs.iter().sum::<f64>() / n_boot as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64).sqrt();
    let difference = pauc_a - pauc_b;
    let scale = pauc_a.abs().max(pauc_b.abs()).max(f64::MIN_POSITIVE);
    let z = if sd > 1e-12 * scale {
        difference / sd
    } else if difference.abs() > 1e-12 * scale {
        // every replicate gives the same nonzero difference
        f64::INFINITY.copysign(difference)
    } else {
        return Err(EtasError::DegenerateVariance);
    };
    Ok(BootstrapReport {
        pauc_a,
        pauc_b,
        difference,
        sd,
        z,
        p_value: normal_upper_tail(z),
        n_boot,
        seed,
    })
}
