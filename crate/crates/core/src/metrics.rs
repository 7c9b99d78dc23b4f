//! Binary classification metrics. Class 1 is the positive (vulnerable) class.

use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Data("cannot score an empty test set".into()));
        }
        if predicted.len() != truth.len() {
            return Err(Error::Data("prediction and label counts differ".into()));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the affected value was reported as 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let mut undefined = false;
        let accuracy = ratio(c.tp + c.tn, c.total(), &mut undefined);
        let precision = ratio(c.tp, c.tp + c.fp, &mut undefined);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut undefined);
        let f1 = if precision + recall == 0.0 {
            undefined = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            confusion: c,
            accuracy,
            precision,
            recall,
            f1,
            undefined,
        }
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        Confusion::from_predictions(predicted, truth).map(Self::from_confusion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            num_traits::Float::sqrt(ss / (n - 1) as f64)
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSummary {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn summarize(runs: &[Metrics]) -> MetricSummary {
    let col = |f: fn(&Metrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    MetricSummary {
        runs: runs.len(),
        accuracy: col(|m| m.accuracy),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        f1: col(|m| m.f1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Metrics {
        Metrics::from_confusion(Confusion { tp, tn, fp, fn_ })
    }

    #[test]
    fn perfect_predictions() {
        let m = counts(1, 1, 0, 0);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!m.undefined);
    }

    #[test]
    fn worked_example() {
        let m = counts(80, 90, 10, 20);
        assert!((m.precision - 0.8889).abs() < 5e-5);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8421).abs() < 5e-5);
        assert!((m.accuracy - 0.85).abs() < 1e-12);
    }

    #[test]
    fn single_class_predictions_on_balanced_data() {
        let m = Metrics::from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(Metrics::from_predictions(&[], &[]).is_err());
    }

    #[test]
    fn summary_of_identical_runs_has_zero_spread() {
        let m = counts(5, 3, 1, 1);
        let s = summarize(&[m, m, m]);
        assert_eq!(s.f1.mean, m.f1);
        assert_eq!(s.f1.std, 0.0);
        let one = summarize(&[m]);
        assert_eq!(one.accuracy.mean, m.accuracy);
    }

    #[test]
    fn sample_standard_deviation() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
