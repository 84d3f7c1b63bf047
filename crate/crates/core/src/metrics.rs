//! Binary classification metrics with label 1 as the positive class.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, gold: u8, predicted: u8) {
        match (gold, predicted) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn from_pairs(gold: &[u8], predicted: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&g, &p) in gold.iter().zip(predicted) {
            c.record(g, p);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Confusion,
}

impl EvalReport {
    /// Derives every metric from the confusion counts. Precision, recall and
    /// F1 are 0 when their denominators are 0.
    pub fn from_counts(dataset: impl Into<String>, counts: Confusion) -> Self {
        let n = counts.total();
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            dataset: dataset.into(),
            n,
            accuracy: ratio(counts.tp + counts.tn, n),
            precision,
            recall,
            f1,
            counts,
        }
    }

    /// One aligned text line, percentages with two decimals.
    pub fn summary(&self) -> String {
        format!(
            "{:<24} n={:<6} acc={:6.2}% P={:6.2}% R={:6.2}% F1={:6.2}%  (tp={} fp={} tn={} fn={})",
            self.dataset,
            self.n,
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let r = EvalReport::from_counts("x", Confusion { tp: 2, fp: 1, tn: 6, fn_: 1 });
        assert_eq!(r.n, 10);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.precision - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_degenerate() {
        let gold = [1, 0, 1, 1, 0];
        let r = EvalReport::from_counts("p", Confusion::from_pairs(&gold, &gold));
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));

        let r = EvalReport::from_counts("z", Confusion::from_pairs(&[1, 0], &[0, 0]));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn serialized_field_names() {
        let r = EvalReport::from_counts("d", Confusion { tp: 1, fp: 0, tn: 0, fn_: 0 });
        let j = serde_json::to_value(&r).unwrap();
        for key in ["dataset", "n", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn"] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
    }
}
