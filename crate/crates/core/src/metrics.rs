//! Confusion matrix, overall accuracy and intersection over union.

use crate::error::{contract, Result};

/// `counts[t][p]` = points of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Segmentation quality derived from a [`ConfusionMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// `None` for classes that neither occur nor are predicted.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let c = self.num_classes;
        if let Some((t, p)) = truth.iter().zip(pred).find(|(t, p)| **t >= c || **p >= c) {
            return Err(contract(format!(
                "class pair ({t}, {p}) out of range for {c} classes"
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(contract("confusion matrices differ in class count"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Ground-truth points of class `c`.
    pub fn truth_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    /// Points predicted as class `c`.
    pub fn predicted_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    /// OA = trace / total; IoU_c = TP / (T + P − TP). Classes absent from
    /// both truth and prediction are excluded from the mean.
    pub fn metrics(&self) -> Metrics {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.true_positives(c)).sum();
        let per_class_iou: Vec<Option<f64>> = (0..self.num_classes)
            .map(|c| {
                iou(
                    self.true_positives(c),
                    self.truth_count(c),
                    self.predicted_count(c),
                )
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Metrics {
            overall_accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            per_class_iou,
            mean_iou,
        }
    }
}

/// `TP / (T + P − TP)`, or `None` when `T = P = 0`.
pub fn iou(tp: u64, truth: u64, predicted: u64) -> Option<f64> {
    let union = truth + predicted - tp;
    (union > 0).then(|| tp as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn substitute_into_formula() {
        assert_eq!(iou(5, 8, 7), Some(0.5));
        assert_eq!(iou(0, 0, 0), None);
        assert_eq!(iou(0, 0, 3), Some(0.0));
    }

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        let labels = [0, 1, 2, 2, 1];
        cm.add(&labels, &labels).unwrap();
        let m = cm.metrics();
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.per_class_iou, vec![Some(1.0); 3]);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_pair() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let m = cm.metrics();
        assert_eq!(m.overall_accuracy, 0.5);
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.mean_iou, 0.25);
    }

    #[test]
    fn absent_classes_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1], &[0, 1]).unwrap();
        let m = cm.metrics();
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.add(&[0, 2], &[0, 1]).is_err());
        assert!(cm.add(&[0], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn miou_bounded_by_best_class(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let mut cm = ConfusionMatrix::new(4);
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            cm.add(&t, &p).unwrap();
            let m = cm.metrics();
            let best = m.per_class_iou.iter().flatten().copied().fold(0.0, f64::max);
            prop_assert!(m.mean_iou <= best + 1e-15);
            for v in m.per_class_iou.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            prop_assert_eq!(cm.total(), t.len() as u64);
        }
    }
}
