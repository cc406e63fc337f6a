//! Evaluation metrics: per-image pixel F1 (fake images only), image-level F1
//! at threshold 0.5, and ROC-AUC in the rank-statistic form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {0} pixels, ground truth {1}")]
    ShapeMismatch(usize, usize),

    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("metric needs at least one sample")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DETECTION_THRESHOLD: f64 = 0.5;

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if 2 * tp + fp + fn_ == 0 {
        // No positives anywhere, predicted or actual: perfect by convention.
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Per-image pixel F1 at the closed threshold (p ≥ 0.5 is positive).
/// Authentic images (all-zero ground truth) are excluded from aggregation;
/// they return `None`.
pub fn pixel_f1(prob_mask: &[f32], gt: &[u8], threshold: f64) -> Result<Option<f64>> {
    if prob_mask.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(prob_mask.len(), gt.len()));
    }
    if gt.iter().all(|&g| g == 0) {
        return Ok(None);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in prob_mask.iter().zip(gt) {
        let pred = p as f64 >= threshold;
        match (pred, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Some(f1_from_counts(tp, fp, fn_)))
}

/// Image-level F1 with "fake" as the positive class.
pub fn image_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Rank-statistic AUC: the fraction of (positive, negative) pairs where the
/// positive outscores the negative, ties counting one half. Equals the
/// trapezoidal area under the ROC curve. `None` for single-class inputs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    // Midrank (tie-aware) Mann-Whitney statistic.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the average rank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * n)))
}

/// One evaluated sample. `pixel_f1` is `None` for authentic images.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub label: u8,
    pub pixel_f1: Option<f64>,
    pub pred_label: u8,
    pub score: f64,
}

/// Aggregate report; every aggregate is reproducible from `rows`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub pixel_f1: Option<f64>,
    pub image_f1: f64,
    pub image_auc: Option<f64>,
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    /// Build the report from per-sample rows; aggregates are recomputed here
    /// and nowhere else.
    pub fn from_rows(rows: Vec<SampleRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        let pixel_scores: Vec<f64> = rows.iter().filter_map(|r| r.pixel_f1).collect();
        let pixel_f1 = if pixel_scores.is_empty() {
            None
        } else {
            Some(pixel_scores.iter().sum::<f64>() / pixel_scores.len() as f64)
        };
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let image_f1 = image_f1(&scores, &labels, DETECTION_THRESHOLD)?;
        let image_auc = roc_auc(&scores, &labels)?;
        Ok(EvalReport {
            pixel_f1,
            image_f1,
            image_auc,
            rows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
