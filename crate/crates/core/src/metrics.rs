//! Single-label classification metrics: per-class confusion counts and
//! support-weighted precision, recall, F1 and F0.5, reported in percent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F-beta from precision and recall; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub cases: usize,
    pub correct: usize,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub weighted_f05: f64,
    /// Micro averages coincide with accuracy for single-label predictions.
    pub micro_f1: f64,
    pub per_class: BTreeMap<String, ClassCounts>,
}

impl ClassificationReport {
    /// `pairs` are (truth, prediction). Classes with zero support carry zero weight.
    pub fn compute<S: AsRef<str>>(pairs: &[(S, S)]) -> Self {
        let mut per_class: BTreeMap<String, ClassCounts> = BTreeMap::new();
        let mut correct = 0;
        for (truth, pred) in pairs {
            let (truth, pred) = (truth.as_ref(), pred.as_ref());
            per_class.entry(truth.to_owned()).or_default().support += 1;
            if truth == pred {
                correct += 1;
                per_class.entry(truth.to_owned()).or_default().tp += 1;
            } else {
                per_class.entry(truth.to_owned()).or_default().fn_ += 1;
                per_class.entry(pred.to_owned()).or_default().fp += 1;
            }
        }
        let total: usize = per_class.values().map(|c| c.support).sum();
        let weighted = |metric: &dyn Fn(&ClassCounts) -> f64| {
            if total == 0 {
                return 0.0;
            }
            100.0
                * per_class
                    .values()
                    .map(|c| c.support as f64 * metric(c))
                    .sum::<f64>()
                / total as f64
        };
        ClassificationReport {
            cases: pairs.len(),
            correct,
            weighted_precision: weighted(&|c| c.precision()),
            weighted_recall: weighted(&|c| c.recall()),
            weighted_f1: weighted(&|c| c.f_beta(1.0)),
            weighted_f05: weighted(&|c| c.f_beta(0.5)),
            micro_f1: 100.0 * ratio(correct, pairs.len()),
            per_class,
        }
    }
}
