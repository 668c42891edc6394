//! Evaluation metrics and baseline predictors.
//!
//! * MDE is the mean haversine distance in km on a sphere of radius
//!   6371.0088 km; altitude is ignored.
//! * AUC is the Mann-Whitney statistic with midranks for ties.
//! * AUPR integrates precision over recall as a right-continuous step
//!   function: thresholds are the distinct scores in decreasing order, and
//!   each recall increment is weighted by the precision reached at that
//!   threshold (all tied scores enter together).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{embed, InputPipeline};
use crate::nn::{Parameters, PatchEncoder};
use crate::trajectory::Trajectory;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
pub const MAPE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub horizon: usize,
    pub count: usize,
    /// Per dimension: lon, lat, alt.
    pub mae: [f64; 3],
    pub rmse: [f64; 3],
    /// Percent; `None` when every target of a dimension was excluded.
    pub mape: [Option<f64>; 3],
    pub mape_excluded: [usize; 3],
    pub mde_km: f64,
}

fn check_pairs<A, B>(pred: &[A], truth: &[B]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Precondition(format!(
            "metric inputs need equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn regression_metrics(pred: &[[f64; 3]], truth: &[[f64; 3]], horizon: usize) -> Result<RegressionReport> {
    check_pairs(pred, truth)?;
    let n = pred.len() as f64;
    let mut mae = [0.0; 3];
    let mut rmse = [0.0; 3];
    let mut mape = [None; 3];
    let mut mape_excluded = [0; 3];
    for k in 0..3 {
        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut pct = 0.0;
        let mut used = 0usize;
        for (p, t) in pred.iter().zip(truth) {
            let d = p[k] - t[k];
            abs += d.abs();
            sq += d * d;
            if t[k].abs() >= MAPE_EPS {
                pct += d.abs() / t[k].abs();
                used += 1;
            }
        }
        mae[k] = abs / n;
        rmse[k] = (sq / n).sqrt();
        mape_excluded[k] = pred.len() - used;
        if used > 0 {
            mape[k] = Some(100.0 * pct / used as f64);
        }
    }
    Ok(RegressionReport {
        horizon,
        count: pred.len(),
        mae,
        rmse,
        mape,
        mape_excluded,
        mde_km: mde(pred, truth)?,
    })
}

/// Great-circle distance between `(lon, lat)` points given in degrees.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn mde(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| haversine_km([p[0], p[1]], [t[0], t[1]])).sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub zero_support_classes: Vec<usize>,
}

/// Accuracy with macro-averaged precision and recall over `num_classes`.
pub fn classification_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<ClassificationReport> {
    check_pairs(pred, truth)?;
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::ClassOutOfRange(p.max(t)));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut zero_support_classes = Vec::new();
    for c in 0..num_classes {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..num_classes).map(|t| confusion[t][c]).sum();
        if support == 0 {
            log::warn!("class {c} has no support; it contributes 0 to macro averages");
            zero_support_classes.push(c);
        } else {
            recall += confusion[c][c] as f64 / support as f64;
        }
        if predicted > 0 {
            precision += confusion[c][c] as f64 / predicted as f64;
        }
    }
    Ok(ClassificationReport {
        accuracy: correct as f64 / pred.len() as f64,
        precision: precision / num_classes as f64,
        recall: recall / num_classes as f64,
        confusion,
        zero_support_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auc: f64,
    pub aupr: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// 1-based ranks with ties replaced by their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn auc_aupr(scores: &[f64], labels: &[bool]) -> Result<DetectionReport> {
    check_pairs(scores, labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("anomaly scores".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let auc = (rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut aupr = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            }
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(DetectionReport {
        auc,
        aupr,
        positives: pos,
        negatives: neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean milliseconds per trajectory representation.
    pub mtc_ms: f64,
    pub runs: usize,
    pub warmups: usize,
    pub parameters: usize,
    pub parameters_millions: f64,
}

pub const MTC_WARMUPS: usize = 10;
pub const MTC_MIN_RUNS: usize = 100;

/// Embeds every trajectory after `MTC_WARMUPS` warmup runs and reports the
/// mean wall-clock time per trajectory.
pub fn mtc(encoder: &PatchEncoder, pipeline: &InputPipeline, dataset: &[Trajectory]) -> Result<TimingReport> {
    if dataset.len() < MTC_MIN_RUNS {
        return Err(Error::Precondition(format!(
            "timing needs at least {MTC_MIN_RUNS} trajectories, got {}",
            dataset.len()
        )));
    }
    for t in dataset.iter().cycle().take(MTC_WARMUPS) {
        std::hint::black_box(embed(encoder, pipeline, t)?);
    }
    let start = Instant::now();
    for t in dataset {
        std::hint::black_box(embed(encoder, pipeline, t)?);
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / dataset.len() as f64;
    let parameters = encoder.num_params();
    Ok(TimingReport {
        mtc_ms: ms,
        runs: dataset.len(),
        warmups: MTC_WARMUPS,
        parameters,
        parameters_millions: parameters as f64 / 1e6,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    ConstantPosition,
    LinearExtrapolation,
}

/// Position `horizon` steps after the end of `history`.
pub fn baseline_predict(history: &Trajectory, horizon: usize, kind: BaselineKind) -> Result<[f64; 3]> {
    let n = history.len();
    let need = match kind {
        BaselineKind::ConstantPosition => 1,
        BaselineKind::LinearExtrapolation => 2,
    };
    if n < need {
        return Err(Error::Precondition(format!("{kind:?} baseline needs {need} points, got {n}")));
    }
    let last = history.points[n - 1].position();
    Ok(match kind {
        BaselineKind::ConstantPosition => last,
        BaselineKind::LinearExtrapolation => {
            let prev = history.points[n - 2].position();
            std::array::from_fn(|k| last[k] + horizon as f64 * (last[k] - prev[k]))
        }
    })
}

/// Distance-threshold anomaly score: the largest Euclidean distance between
/// a position and the mean of its `half_window` neighbours on each side.
/// Points without a full window are skipped.
pub fn residual_score(traj: &Trajectory, half_window: usize) -> f64 {
    let pos: Vec<[f64; 3]> = traj.points.iter().map(|p| p.position()).collect();
    let w = half_window.max(1);
    let mut best = 0.0f64;
    for i in w..pos.len().saturating_sub(w) {
        let mut mean = [0.0; 3];
        for (j, p) in pos.iter().enumerate().take(i + w + 1).skip(i - w) {
            if j != i {
                for k in 0..3 {
                    mean[k] += p[k] / (2 * w) as f64;
                }
            }
        }
        let d = (0..3).map(|k| (pos[i][k] - mean[k]).powi(2)).sum::<f64>().sqrt();
        best = best.max(d);
    }
    best
}
