use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold and predicted lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no items to score")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    /// F1 = 2PR/(P+R); zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-label TP/FP/FN over every label seen in gold or predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_label: BTreeMap<String, ClassCounts>,
}

impl ConfusionCounts {
    pub fn tally<G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> Result<Self, MetricError> {
        if gold.len() != predicted.len() {
            return Err(MetricError::LengthMismatch(gold.len(), predicted.len()));
        }
        if gold.is_empty() {
            return Err(MetricError::Empty);
        }
        let mut per_label: BTreeMap<String, ClassCounts> = BTreeMap::new();
        for (g, p) in gold.iter().zip(predicted) {
            let (g, p) = (g.as_ref(), p.as_ref());
            if g == p {
                per_label.entry(g.to_string()).or_default().tp += 1;
            } else {
                per_label.entry(g.to_string()).or_default().fn_ += 1;
                per_label.entry(p.to_string()).or_default().fp += 1;
            }
        }
        Ok(ConfusionCounts { per_label })
    }

    pub fn total(&self) -> usize {
        self.per_label.values().map(|c| c.tp + c.fn_).sum()
    }

    pub fn macro_f1(&self) -> f64 {
        let sum: f64 = self.per_label.values().map(ClassCounts::f1).sum();
        sum / self.per_label.len() as f64
    }
}

/// Unweighted mean of per-class F1 over labels present in gold ∪ predicted.
pub fn macro_f1<G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> Result<f64, MetricError> {
    Ok(ConfusionCounts::tally(gold, predicted)?.macro_f1())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (0 for a single value).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(macro_f1(&["x", "y", "z", "x"], &["x", "y", "z", "x"]).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_case() {
        let c = ConfusionCounts::tally(&["a", "a", "b", "b"], &["a", "a", "a", "a"]).unwrap();
        assert_eq!(c.per_label["a"], ClassCounts { tp: 2, fp: 2, fn_: 0 });
        assert_eq!(c.per_label["a"].f1(), 2.0 / 3.0);
        assert_eq!(c.per_label["b"].f1(), 0.0);
        assert_eq!(c.macro_f1(), 1.0 / 3.0);
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn swapped_pair_scores_zero() {
        assert_eq!(macro_f1(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            macro_f1(&["a"], &["a", "b"]).unwrap_err(),
            MetricError::LengthMismatch(1, 2)
        );
        assert_eq!(macro_f1::<&str, &str>(&[], &[]).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn std_conventions() {
        assert_eq!(std_dev(&[0.7]), 0.0);
        assert_eq!(std_dev(&[1.0, 3.0]), 1.0);
    }

    proptest! {
        #[test]
        fn relabeling_invariance(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40)) {
            let names = ["w", "x", "y", "z"];
            let renamed = ["zz", "a", "mm", "b"];
            let g: Vec<&str> = pairs.iter().map(|p| names[p.0 as usize]).collect();
            let p: Vec<&str> = pairs.iter().map(|p| names[p.1 as usize]).collect();
            let g2: Vec<&str> = pairs.iter().map(|p| renamed[p.0 as usize]).collect();
            let p2: Vec<&str> = pairs.iter().map(|p| renamed[p.1 as usize]).collect();
            let a = macro_f1(&g, &p).unwrap();
            let b = macro_f1(&g2, &p2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
