//! Classification metrics and robustness scores.
//!
//! Binary accuracy/precision/recall/F1 over confusion counts (label 1,
//! hateful, is the positive class), AUROC via the Mann-Whitney rank
//! statistic, and the absolute/relative robustness scores used by the
//! report tables:
//!
//! ```text
//! abs_robustness = 1 - (acc_clean - acc_perturbed) / 100
//! rel_robustness = 1 - (acc_clean - acc_perturbed) / acc_clean
//! ```
//!
//! The division by 100 in `abs_robustness` is intentional even though
//! accuracies live in `[0, 1]`: it reproduces the near-1.0 magnitudes the
//! robustness tables print. Treat it as a fixed scale convention.

use thiserror::Error;

use crate::dataset::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions and labels differ in length ({predictions} vs {labels})")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("auroc needs both classes present (got {positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("relative robustness undefined for zero clean accuracy")]
    ZeroCleanAccuracy,
}

/// Binary confusion counts with label 1 (hateful) as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Count confusion cells over parallel prediction/label slices.
pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = ConfusionCounts {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (&pred, &truth) in predictions.iter().zip(labels.iter()) {
        match (pred, truth) {
            (Label::Hateful, Label::Hateful) => counts.tp += 1,
            (Label::Benign, Label::Benign) => counts.tn += 1,
            (Label::Hateful, Label::Benign) => counts.fp += 1,
            (Label::Benign, Label::Hateful) => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

/// Compute accuracy/precision/recall/F1 plus macro variants from counts.
///
/// Zero-denominator ratios come back as 0 with the `degenerate` flag set.
pub fn basic_metrics(c: &ConfusionCounts) -> Result<BasicMetrics, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let total = c.total() as f64;
    let accuracy = (c.tp + c.tn) as f64 / total;

    let (precision, p_deg) = ratio(c.tp, c.tp + c.fp);
    let (recall, r_deg) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f_deg) = harmonic(precision, recall);

    // Macro variants treat each class as positive in turn; for the negative
    // class the roles of (tp, fp, fn) become (tn, fn, fp).
    let (precision_neg, pn_deg) = ratio(c.tn, c.tn + c.fn_);
    let (recall_neg, rn_deg) = ratio(c.tn, c.tn + c.fp);
    let (f1_neg, fn_deg) = harmonic(precision_neg, recall_neg);

    Ok(BasicMetrics {
        accuracy,
        precision,
        recall,
        f1,
        precision_macro: 0.5 * (precision + precision_neg),
        recall_macro: 0.5 * (recall + recall_neg),
        f1_macro: 0.5 * (f1 + f1_neg),
        balanced_accuracy: 0.5 * (recall + recall_neg),
        degenerate: p_deg || r_deg || f_deg || pn_deg || rn_deg || fn_deg,
    })
}

/// Full metric set for one condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// Mean per-class recall; the alternative reading of "macro accuracy".
    pub balanced_accuracy: f64,
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> (f64, bool) {
    if p + r == 0.0 {
        (0.0, true)
    } else {
        (2.0 * p * r / (p + r), false)
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic.
///
/// Equals the fraction of (positive, negative) pairs where the positive
/// sample scores higher, ties counted 1/2, which is the trapezoidal ROC
/// area. Errors on single-class input instead of silently returning 0.5.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let positives = labels.iter().filter(|&&l| l == Label::Hateful).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            total: labels.len(),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == Label::Hateful {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos = positives as f64;
    let n_neg = negatives as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Absolute robustness: `1 - (clean - perturbed) / 100`, accuracies on the
/// `[0, 1]` scale. See the module docs for the scale convention.
pub fn abs_robustness(a_clean: f64, a_pert: f64) -> f64 {
    1.0 - (a_clean - a_pert) / 100.0
}

/// Relative robustness: `1 - (clean - perturbed) / clean`. Values above 1
/// mean the metric improved under noise.
pub fn rel_robustness(a_clean: f64, a_pert: f64) -> Result<f64, MetricsError> {
    if a_clean == 0.0 {
        return Err(MetricsError::ZeroCleanAccuracy);
    }
    Ok(1.0 - (a_clean - a_pert) / a_clean)
}

/// Metrics for one evaluated condition; robustness fields are present only
/// for perturbed conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Condition tag, e.g. `clean`, `t1-i2`, `text:typos`.
    pub condition: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_macro: f64,
    pub auroc: f64,
    pub abs_robust: Option<f64>,
    pub rel_robust: Option<f64>,
    pub degenerate: bool,
}

impl MetricsRow {
    pub fn from_parts(condition: String, basics: &BasicMetrics, auroc: f64) -> MetricsRow {
        MetricsRow {
            condition,
            accuracy: basics.accuracy,
            precision: basics.precision,
            recall: basics.recall,
            f1: basics.f1,
            f1_macro: basics.f1_macro,
            auroc,
            abs_robust: None,
            rel_robust: None,
            degenerate: basics.degenerate,
        }
    }

    /// Fill robustness columns relative to a clean baseline accuracy.
    pub fn with_robustness(mut self, clean_accuracy: f64) -> Result<MetricsRow, MetricsError> {
        self.abs_robust = Some(abs_robustness(clean_accuracy, self.accuracy));
        self.rel_robust = Some(rel_robustness(clean_accuracy, self.accuracy)?);
        Ok(self)
    }

    pub const CSV_HEADER: &'static str =
        "condition,accuracy,auroc,f1,precision,recall,abs_robust,rel_robust";

    /// One CSV line, 5-decimal fixed formatting.
    pub fn to_csv_line(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.5}")).unwrap_or_default()
        }
        format!(
            "{},{:.5},{:.5},{:.5},{:.5},{:.5},{},{}",
            self.condition,
            self.accuracy,
            self.auroc,
            self.f1,
            self.precision,
            self.recall,
            opt(self.abs_robust),
            opt(self.rel_robust),
        )
    }
}
