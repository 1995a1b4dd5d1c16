//! Confusion-matrix metrics for single-label classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Kind {
    /// F1 of the positive class; used for two-class tasks.
    Binary,
    /// Unweighted mean of per-class F1.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub f1_kind: F1Kind,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl MetricReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of class-index predictions against class-index labels.
///
/// Two-class tasks report binary F1 of `positive_class`; larger alphabets
/// report macro F1. A class that never occurs in `labels` still counts in the
/// balanced accuracy, with recall 0.
pub fn compute_metrics(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
    positive_class: usize,
) -> Result<MetricReport> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Contract("metrics need at least one class".into()));
    }
    if num_classes == 2 && positive_class >= 2 {
        return Err(Error::Contract(format!(
            "positive class {positive_class} outside binary task"
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Contract(format!(
                "class index {} outside {num_classes} classes",
                p.max(t)
            )));
        }
        confusion[t][p] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1s = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        if support == 0 && total > 0 {
            log::warn!("class {c} has no samples; its recall counts as 0");
        }
        precision.push(ratio(tp, predicted));
        recall.push(ratio(tp, support));
        // 2TP / (2TP + FP + FN)
        f1s.push(ratio(2 * tp, support + predicted));
    }
    let (f1, f1_kind) = if num_classes == 2 {
        (f1s[positive_class], F1Kind::Binary)
    } else {
        (f1s.iter().sum::<f64>() / num_classes as f64, F1Kind::Macro)
    };
    Ok(MetricReport {
        accuracy: ratio(correct, total),
        balanced_accuracy: recall.iter().sum::<f64>() / num_classes as f64,
        f1,
        f1_kind,
        confusion,
        precision,
        recall,
    })
}
