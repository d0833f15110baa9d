//! Binary classification metrics. The positive class is label 1 (anomalous).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, pred: u8, label: u8) {
        match (pred != 0, label != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let mut r = binary_scores(cm);
        let (p, rc, f) = weighted_scores(cm);
        r.precision_w = p;
        r.recall_w = rc;
        r.f1_w = f;
        r
    }

    /// `key = value` lines, fixed order and precision.
    pub fn to_key_values(&self) -> String {
        format!(
            "accuracy = {:.6}\nprecision = {:.6}\nrecall = {:.6}\nf1 = {:.6}\n\
             precision_weighted = {:.6}\nrecall_weighted = {:.6}\nf1_weighted = {:.6}\n",
            self.accuracy, self.precision, self.recall, self.f1, self.precision_w, self.recall_w, self.f1_w
        )
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        cm.record(p, l);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy plus positive-class precision, recall and F1. Weighted fields are left at 0.
pub fn binary_scores(cm: &ConfusionMatrix) -> MetricsReport {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    MetricsReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision,
        recall,
        f1: f1_score(precision, recall),
        ..Default::default()
    }
}

/// Per-class precision/recall/F1 averaged with true-class support as weights.
pub fn weighted_scores(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    // class 1 as positive, then class 0 as positive (roles of the cells swap)
    let per_class = [
        (cm.tp, cm.fp, cm.fn_, cm.tp + cm.fn_),
        (cm.tn, cm.fn_, cm.fp, cm.tn + cm.fp),
    ];
    let total = cm.total();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (tp, fp, fn_, support) in per_class {
        let w = ratio(support, total);
        let pc = ratio(tp, tp + fp);
        let rc = ratio(tp, tp + fn_);
        p += w * pc;
        r += w * rc;
        f += w * f1_score(pc, rc);
    }
    (p, r, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (2, 1, 0, 0));
        assert_eq!(confusion(&[1, 1], &[0, 0]).unwrap().fp, 2);
        assert_eq!(confusion(&[0], &[1]).unwrap().fn_, 1);
        assert_eq!(confusion(&[0], &[1, 0]).unwrap_err(), Error::LengthMismatch(1, 2));
        assert_eq!(confusion(&[], &[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn f1_reproduces_reported_baseline() {
        let f1 = f1_score(0.9203, 0.5147);
        assert!((f1 - 0.6602).abs() < 5e-4, "{f1}");
    }

    #[test]
    fn degenerate_denominators() {
        let perfect = ConfusionMatrix {
            tp: 3,
            fp: 0,
            tn: 2,
            fn_: 0,
        };
        let r = MetricsReport::from_confusion(&perfect);
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((r.precision_w, r.recall_w, r.f1_w), (1.0, 1.0, 1.0));

        let none_predicted = ConfusionMatrix {
            tp: 0,
            fp: 0,
            tn: 5,
            fn_: 2,
        };
        let r = binary_scores(&none_predicted);
        assert_eq!((r.precision, r.f1), (0.0, 0.0));
    }

    #[test]
    fn weighted_examples() {
        let sym = ConfusionMatrix {
            tp: 7,
            fp: 3,
            tn: 7,
            fn_: 3,
        };
        let (p, r, f) = weighted_scores(&sym);
        assert!((p - 0.7).abs() < 1e-15 && (r - 0.7).abs() < 1e-15 && (f - 0.7).abs() < 1e-15);

        let all_negative = ConfusionMatrix {
            tp: 0,
            fp: 0,
            tn: 9,
            fn_: 0,
        };
        assert_eq!(weighted_scores(&all_negative).1, 1.0);
    }

    #[test]
    fn majority_predictor_on_ninety_ten() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 10)).collect();
        let preds = vec![0u8; 100];
        let r = binary_scores(&confusion(&preds, &labels).unwrap());
        assert_eq!(r.accuracy, 0.9);
        assert_eq!(r.recall, 0.0);
    }
}
