//! Multi-label classification metrics: support-weighted F1 and mean
//! per-label accuracy (with subset accuracy reported alongside for
//! transparency, since plain "accuracy" is ambiguous for multi-label
//! output).

use serde::{Deserialize, Serialize};

use crate::dataset::{MoodLabels, NUM_MOOD_LABELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_f1: f64,
    pub mean_accuracy: f64,
    pub subset_accuracy: f64,
    pub per_label_f1: Vec<f64>,
    pub support: Vec<usize>,
    pub n_records: usize,
}

fn check_lengths(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "label lists differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Contract("metrics over zero records".into()));
    }
    Ok(())
}

/// Per-label binary F1 (zero when precision+recall is zero), averaged with
/// weights proportional to each label's positive support. Zero total
/// support yields 0 with a warning.
pub fn weighted_f1(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let (f1s, support) = per_label_f1(y_true, y_pred);
    let total: usize = support.iter().sum();
    if total == 0 {
        log::warn!("weighted_f1: no positive labels in ground truth; returning 0");
        return Ok(0.0);
    }
    Ok(f1s
        .iter()
        .zip(&support)
        .map(|(f1, &s)| f1 * s as f64)
        .sum::<f64>()
        / total as f64)
}

/// Binary F1 per label plus positive supports.
pub fn per_label_f1(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> (Vec<f64>, Vec<usize>) {
    let mut f1s = Vec::with_capacity(NUM_MOOD_LABELS);
    let mut supports = Vec::with_capacity(NUM_MOOD_LABELS);
    for j in 0..NUM_MOOD_LABELS {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (t, p) in y_true.iter().zip(y_pred) {
            match (t.0[j], p.0[j]) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        f1s.push(f1);
        supports.push(tp + fn_);
    }
    (f1s, supports)
}

/// Per-label accuracy averaged over the seven labels.
pub fn mean_accuracy(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let mut acc = 0.0;
    for j in 0..NUM_MOOD_LABELS {
        let correct = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| t.0[j] == p.0[j])
            .count();
        acc += correct as f64 / n;
    }
    Ok(acc / NUM_MOOD_LABELS as f64)
}

/// Fraction of records with every label correct.
pub fn subset_accuracy(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let hits = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / y_true.len() as f64)
}

pub fn report(y_true: &[MoodLabels], y_pred: &[MoodLabels]) -> Result<MetricsReport> {
    let (per_label, support) = per_label_f1(y_true, y_pred);
    Ok(MetricsReport {
        weighted_f1: weighted_f1(y_true, y_pred)?,
        mean_accuracy: mean_accuracy(y_true, y_pred)?,
        subset_accuracy: subset_accuracy(y_true, y_pred)?,
        per_label_f1: per_label,
        support,
        n_records: y_true.len(),
    })
}

/// Elementwise mean of several reports (fold aggregation).
pub fn mean_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Contract("mean of zero reports".into()));
    }
    let k = reports.len() as f64;
    let mut per_label = vec![0.0f64; NUM_MOOD_LABELS];
    let mut support = vec![0usize; NUM_MOOD_LABELS];
    for r in reports {
        for (a, b) in per_label.iter_mut().zip(&r.per_label_f1) {
            *a += b / k;
        }
        for (a, b) in support.iter_mut().zip(&r.support) {
            *a += b;
        }
    }
    Ok(MetricsReport {
        weighted_f1: reports.iter().map(|r| r.weighted_f1).sum::<f64>() / k,
        mean_accuracy: reports.iter().map(|r| r.mean_accuracy).sum::<f64>() / k,
        subset_accuracy: reports.iter().map(|r| r.subset_accuracy).sum::<f64>() / k,
        per_label_f1: per_label,
        support,
        n_records: reports.iter().map(|r| r.n_records).sum(),
    })
}
