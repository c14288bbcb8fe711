//! Confusion matrix and derived evaluation metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// 2x2 CSV, rows = truth, columns = prediction.
    pub fn to_csv(&self) -> String {
        format!(
            ",pred_0,pred_1\ntrue_0,{},{}\ntrue_1,{},{}\n",
            self.tn, self.fp, self.fn_, self.tp
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
}

/// Probability >= threshold maps to label 1. The boundary itself counts as
/// positive.
pub fn threshold_decisions(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs
        .iter()
        .map(|&p| if p >= threshold { 1 } else { 0 })
        .collect()
}

pub fn confusion(decisions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if decisions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} decisions vs {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&d, &y) in decisions.iter().zip(labels) {
        match (y, d) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fp += 1,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "non-binary value in decisions/labels: ({d}, {y})"
                )))
            }
        }
    }
    Ok(cm)
}

/// (sensitivity + specificity) / 2. A class absent from the labels makes the
/// quantity undefined and is reported as an explicit error, never NaN.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.tp + cm.fn_ == 0 {
        return Err(Error::MissingClass(1));
    }
    if cm.tn + cm.fp == 0 {
        return Err(Error::MissingClass(0));
    }
    let sens = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
    let spec = cm.tn as f64 / (cm.tn + cm.fp) as f64;
    Ok((sens + spec) / 2.0)
}

pub fn metric_report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let ba = balanced_accuracy(cm)?;
    Ok(MetricReport {
        sensitivity: cm.tp as f64 / (cm.tp + cm.fn_) as f64,
        specificity: cm.tn as f64 / (cm.tn + cm.fp) as f64,
        balanced_accuracy: ba,
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundary_convention() {
        assert_eq!(threshold_decisions(&[0.5, 0.49, 1.0, 0.0], 0.5), [1, 0, 1, 0]);
        assert_eq!(threshold_decisions(&[0.99, 1.0], 1.0), [0, 1]);
    }

    #[test]
    fn hand_evaluated_fixture() {
        // tp=5, fn=5, tn=9, fp=1: sens 0.5, spec 0.9, BA 0.7
        let cm = ConfusionMatrix {
            tp: 5,
            fn_: 5,
            tn: 9,
            fp: 1,
        };
        let r = metric_report(&cm).unwrap();
        assert_eq!(r.sensitivity, 0.5);
        assert_eq!(r.specificity, 0.9);
        assert_eq!(r.balanced_accuracy, 0.7);
        assert_eq!(r.accuracy, 0.7);
    }

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 1, 0, 1];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!(cm.fp + cm.fn_, 0);
        assert_eq!(balanced_accuracy(&cm).unwrap(), 1.0);
    }

    #[test]
    fn constant_positive_predictor_scores_half() {
        let labels = vec![0, 0, 0, 1, 1];
        let decisions = vec![1; 5];
        let cm = confusion(&decisions, &labels).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.5);
    }

    #[test]
    fn missing_class_is_explicit_error() {
        let cm = confusion(&[1, 0, 1], &[1, 1, 1]).unwrap();
        assert!(matches!(balanced_accuracy(&cm), Err(Error::MissingClass(0))));
        let cm = confusion(&[0, 0], &[0, 0]).unwrap();
        assert!(matches!(balanced_accuracy(&cm), Err(Error::MissingClass(1))));
    }

    #[test]
    fn ba_order_invariance_and_equal_count_identity() {
        let labels = [1, 0, 1, 0, 1, 0];
        let decisions = [1, 1, 0, 0, 1, 0];
        let cm1 = confusion(&decisions, &labels).unwrap();
        let mut pairs: Vec<_> = decisions.iter().zip(labels.iter()).collect();
        pairs.reverse();
        let d2: Vec<u8> = pairs.iter().map(|(d, _)| **d).collect();
        let l2: Vec<u8> = pairs.iter().map(|(_, y)| **y).collect();
        let cm2 = confusion(&d2, &l2).unwrap();
        assert_eq!(
            balanced_accuracy(&cm1).unwrap(),
            balanced_accuracy(&cm2).unwrap()
        );
        // equal class counts: BA equals plain accuracy
        let r = metric_report(&cm1).unwrap();
        assert_eq!(r.balanced_accuracy, r.accuracy);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix {
            tp: 1,
            fp: 2,
            tn: 3,
            fn_: 4,
        };
        assert_eq!(cm.to_csv(), ",pred_0,pred_1\ntrue_0,3,2\ntrue_1,4,1\n");
    }
}
