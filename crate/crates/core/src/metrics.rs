//! Confusion matrix and macro-averaged classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Validation(format!("{} cells for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Validation(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; k * k];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Validation(format!("sample {i}: class index ({t}, {p}) outside [0, {k})")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Precision had a zero denominator (class never predicted) and counts as 0.
    pub precision_undefined: bool,
    /// Recall had a zero denominator (class absent) and counts as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Unweighted means over all `K` classes. Zero denominators contribute 0
/// and are flagged in `per_class`.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let k = cm.k;
    if k < 2 {
        return Err(Error::UndefinedMetrics(format!("need at least 2 classes, got {k}")));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetrics("confusion matrix is empty".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let support: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                precision_undefined: predicted == 0,
                recall_undefined: support == 0,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_recall = mean(|c| c.recall);
    Ok(MetricsReport {
        macro_f1: mean(|c| c.f1),
        macro_precision: mean(|c| c.precision),
        macro_recall,
        accuracy: (0..k).map(|c| cm.get(c, c)).sum::<u64>() as f64 / total as f64,
        balanced_accuracy: macro_recall,
        per_class,
    })
}

impl MetricsReport {
    /// Flat `key=value` lines, one per metric and per-class field.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "macro_f1={}\nmacro_precision={}\nmacro_recall={}\naccuracy={}\nbalanced_accuracy={}\n",
            self.macro_f1, self.macro_precision, self.macro_recall, self.accuracy, self.balanced_accuracy
        );
        for (c, m) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "class{c}.precision={}\nclass{c}.recall={}\nclass{c}.f1={}\nclass{c}.support={}\n\
                 class{c}.precision_undefined={}\nclass{c}.recall_undefined={}\n",
                m.precision, m.recall, m.f1, m.support, m.precision_undefined, m.recall_undefined
            ));
        }
        s
    }
}
