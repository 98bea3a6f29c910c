//! Pixel-level confusion counting and overlap metrics.
//!
//! Pooled aggregation sums confusion counts over every image before deriving
//! the ratios; per-image aggregation averages the per-image ratios. Under
//! pooling `iou = f1 / (2 - f1)` holds exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MaskTensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        Self {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn predicted_positive(&self) -> u64 {
        self.true_pos + self.false_pos
    }

    pub fn actual_positive(&self) -> u64 {
        self.true_pos + self.false_neg
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            true_pos: self.true_pos + o.true_pos,
            false_pos: self.false_pos + o.false_pos,
            false_neg: self.false_neg + o.false_neg,
            true_neg: self.true_neg + o.true_neg,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Pooled,
    MeanPerImage,
}

/// Values used when a ratio has a zero denominator.
///
/// When prediction and truth are both empty the overlap scores are
/// `empty_match` (a correct rejection). Precision with nothing predicted is
/// `empty_match` if the truth is also empty and 0 otherwise; recall with
/// nothing to find mirrors it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroDivision {
    pub empty_match: f64,
}

impl Default for ZeroDivision {
    fn default() -> Self {
        Self { empty_match: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub aggregation: Aggregation,
    pub n_images: usize,
    /// Summed counts over every evaluated image.
    pub counts: ConfusionCounts,
}

/// Pixel confusion counts of `pred` against `truth`.
pub fn confusion(pred: &MaskTensor, truth: &MaskTensor) -> Result<ConfusionCounts> {
    if !pred.same_shape(truth) {
        return Err(Error::shape(
            format!("{}x{}", truth.height(), truth.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    // Index 2*truth + pred: 0 = tn, 1 = fp, 2 = fn, 3 = tp.
    let mut cells = [0u64; 4];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        cells[(2 * t + p) as usize] += 1;
    }
    Ok(ConfusionCounts::new(cells[3], cells[1], cells[2], cells[0]))
}

pub fn metrics_from_counts(counts: &ConfusionCounts) -> Result<MetricsReport> {
    metrics_from_counts_with(counts, ZeroDivision::default())
}

pub fn metrics_from_counts_with(counts: &ConfusionCounts, zero: ZeroDivision) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidArgument("no pixels to evaluate".into()));
    }
    let tp = counts.true_pos as f64;
    let fp = counts.false_pos as f64;
    let fn_ = counts.false_neg as f64;
    let tn = counts.true_neg as f64;
    let pred_empty = counts.predicted_positive() == 0;
    let truth_empty = counts.actual_positive() == 0;

    let precision = if pred_empty {
        if truth_empty { zero.empty_match } else { 0.0 }
    } else {
        tp / (tp + fp)
    };
    let recall = if truth_empty {
        if pred_empty { zero.empty_match } else { 0.0 }
    } else {
        tp / (tp + fn_)
    };
    let (f1, iou) = if pred_empty && truth_empty {
        (zero.empty_match, zero.empty_match)
    } else {
        (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
    };
    Ok(MetricsReport {
        iou,
        f1,
        accuracy: (tp + tn) / total as f64,
        precision,
        recall,
        aggregation: Aggregation::Pooled,
        n_images: 1,
        counts: *counts,
    })
}

/// Metrics over a set of `(prediction, truth)` pairs.
pub fn evaluate_set(samples: &[(MaskTensor, MaskTensor)], aggregation: Aggregation) -> Result<MetricsReport> {
    let counts = samples
        .iter()
        .map(|(p, t)| confusion(p, t))
        .collect::<Result<Vec<_>>>()?;
    evaluate_counts(&counts, aggregation)
}

/// Same as [`evaluate_set`] for precomputed per-image counts.
pub fn evaluate_counts(per_image: &[ConfusionCounts], aggregation: Aggregation) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
    }
    let pooled: ConfusionCounts = per_image.iter().copied().sum();
    let mut report = match aggregation {
        Aggregation::Pooled => metrics_from_counts(&pooled)?,
        Aggregation::MeanPerImage => {
            let n = per_image.len() as f64;
            let mut acc = [0.0f64; 5];
            for c in per_image {
                let r = metrics_from_counts(c)?;
                for (a, v) in acc.iter_mut().zip([r.iou, r.f1, r.accuracy, r.precision, r.recall]) {
                    *a += v;
                }
            }
            MetricsReport {
                iou: acc[0] / n,
                f1: acc[1] / n,
                accuracy: acc[2] / n,
                precision: acc[3] / n,
                recall: acc[4] / n,
                aggregation: Aggregation::MeanPerImage,
                n_images: per_image.len(),
                counts: pooled,
            }
        }
    };
    report.aggregation = aggregation;
    report.n_images = per_image.len();
    report.counts = pooled;
    Ok(report)
}
