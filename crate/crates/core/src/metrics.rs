//! Binary classification metrics. Class 1 (AD) is the positive class.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<Confusion> {
    if labels.len() != predictions.len() {
        return Err(Error::Argument(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("confusion of an empty list".into()));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => {
                return Err(Error::Argument(format!(
                    "labels must be 0/1, got ({y}, {p})"
                )))
            }
        }
    }
    Ok(c)
}

/// Area under the ROC curve, equal to the fraction of (positive, negative)
/// pairs ranked correctly with ties counting one half.
///
/// Computed with a single sorted sweep over tie groups.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Argument("labels and scores differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Argument("roc_auc needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the pair count keeps every increment an integer.
    let mut neg_below: u64 = 0;
    let mut twice_wins: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_tie, mut neg_tie) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_tie += 1;
            } else {
                neg_tie += 1;
            }
            j += 1;
        }
        twice_wins += pos_tie * (2 * neg_below + neg_tie);
        neg_below += neg_tie;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
}

impl EvalMetrics {
    /// Metrics from labels, hard predictions and positive-class scores.
    /// Missing positives or negatives are reported as errors.
    pub fn compute(labels: &[u8], predictions: &[u8], scores: &[f64]) -> Result<Self> {
        let c = confusion(labels, predictions)?;
        if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
            return Err(Error::Argument(
                "sensitivity and specificity need both classes in the evaluation set".into(),
            ));
        }
        Ok(Self {
            confusion: c,
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            sensitivity: c.tp as f64 / (c.tp + c.fn_) as f64,
            specificity: c.tn as f64 / (c.tn + c.fp) as f64,
            auc: roc_auc(labels, scores)?,
        })
    }
}

impl fmt::Display for EvalMetrics {
    /// The `key=value` metrics block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy={:.6}", self.accuracy)?;
        writeln!(f, "auc={:.6}", self.auc)?;
        writeln!(f, "sensitivity={:.6}", self.sensitivity)?;
        writeln!(f, "specificity={:.6}", self.specificity)?;
        writeln!(f, "tp={}", self.confusion.tp)?;
        writeln!(f, "tn={}", self.confusion.tn)?;
        writeln!(f, "fp={}", self.confusion.fp)?;
        write!(f, "fn={}", self.confusion.fn_)
    }
}

/// Mean and sample standard deviation of each metric across folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

pub const SUMMARY_KEYS: [&str; 4] = ["accuracy", "auc", "sensitivity", "specificity"];

impl MetricSummary {
    pub fn from_folds(folds: &[EvalMetrics]) -> Self {
        let cols = |m: &EvalMetrics| [m.accuracy, m.auc, m.sensitivity, m.specificity];
        let n = folds.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for i in 0..4 {
            mean[i] = folds.iter().map(|m| cols(m)[i]).sum::<f64>() / n;
            if folds.len() > 1 {
                let ss: f64 = folds.iter().map(|m| (cols(m)[i] - mean[i]).powi(2)).sum();
                std[i] = (ss / (n - 1.0)).sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn accuracy(&self) -> f64 {
        self.mean[0]
    }

    pub fn auc(&self) -> f64 {
        self.mean[1]
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, key) in SUMMARY_KEYS.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "mean_{key}={:.6}\nstd_{key}={:.6}",
                self.mean[i], self.std[i]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_cases() {
        let c = confusion(&[1, 1, 1, 0, 0], &[1, 1, 1, 0, 0]).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 3,
                tn: 2,
                fp: 0,
                fn_: 0
            }
        );
        let c = confusion(&[1, 0], &[0, 1]).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 0,
                tn: 0,
                fp: 1,
                fn_: 1
            }
        );
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap(),
            0.75
        );
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.1, 0.9, 0.2, 0.8]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
        assert!(roc_auc(&[1, 1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn sensitivity_specificity() {
        let m = EvalMetrics::compute(&[1, 1, 0, 0], &[1, 1, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap();
        assert_eq!(
            m.confusion,
            Confusion {
                tp: 2,
                tn: 1,
                fp: 1,
                fn_: 0
            }
        );
        assert_eq!((m.sensitivity, m.specificity, m.accuracy), (1.0, 0.5, 0.75));
        assert!(EvalMetrics::compute(&[1, 1], &[1, 1], &[0.2, 0.3]).is_err());
    }

    #[test]
    fn block_format() {
        let m = EvalMetrics::compute(&[1, 0], &[1, 0], &[0.9, 0.1]).unwrap();
        let text = m.to_string();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(
            keys,
            [
                "accuracy",
                "auc",
                "sensitivity",
                "specificity",
                "tp",
                "tn",
                "fp",
                "fn"
            ]
        );
    }
}
