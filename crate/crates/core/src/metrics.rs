//! Confusion matrices and per-class IoU / F1.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::label::IGNORE;

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return shape_err("ConfusionMatrix", &[classes, classes], &[counts.len()]);
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Adds pixel pairs; ground-truth pixels equal to 255 are skipped.
    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return shape_err("confusion", &[truth.len()], &[pred.len()]);
        }
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t == IGNORE {
                continue;
            }
            for v in [t, p] {
                if v as usize >= self.classes {
                    return Err(Error::InvalidLabel {
                        label: v,
                        index: i,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return shape_err("confusion merge", &[self.classes], &[other.classes]);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(TP, FP, FN)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let fn_ = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        (tp, fp, fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for classes with `TP + FP + FN = 0`.
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub miou: f64,
    pub mf1: f64,
    pub confusion: ConfusionMatrix,
    pub iteration: usize,
    pub wall_clock_secs: f64,
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

impl MetricsReport {
    /// IoU = TP/(TP+FP+FN) and F1 = 2TP/(2TP+FP+FN); classes with an empty
    /// denominator are left out of both means.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let mut iou = Vec::with_capacity(confusion.classes);
        let mut f1 = Vec::with_capacity(confusion.classes);
        for c in 0..confusion.classes {
            let (tp, fp, fn_) = confusion.class_counts(c);
            let denom = tp + fp + fn_;
            if denom == 0 {
                iou.push(None);
                f1.push(None);
            } else {
                iou.push(Some(tp as f64 / denom as f64));
                f1.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            }
        }
        Self {
            miou: mean_defined(&iou),
            mf1: mean_defined(&f1),
            iou,
            f1,
            confusion,
            iteration: 0,
            wall_clock_secs: 0.0,
        }
    }

    /// Mean IoU over a subset of classes, skipping undefined ones.
    pub fn miou_over(&self, classes: &[usize]) -> f64 {
        let picked: Vec<Option<f64>> = classes.iter().map(|&c| self.iou[c]).collect();
        mean_defined(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        let y = [0, 1, 2, 2, 1, 255];
        cm.accumulate(&y, &[0, 1, 2, 2, 1, 0]).unwrap();
        let r = MetricsReport::from_confusion(cm);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.mf1, 1.0);
    }

    #[test]
    fn uniform_two_class_confusion() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]).unwrap();
        let r = MetricsReport::from_confusion(cm);
        assert_eq!(r.iou, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(r.f1, vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn absent_class_is_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 3, 0, 0, 0, 0]).unwrap();
        let r = MetricsReport::from_confusion(cm);
        assert_eq!(r.iou[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn order_of_samples_does_not_matter() {
        let truth = [0u8, 1, 1, 2, 0, 2, 1, 0];
        let pred = [0u8, 1, 0, 2, 2, 2, 1, 1];
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&truth[..4], &pred[..4]).unwrap();
        a.accumulate(&truth[4..], &pred[4..]).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&truth[4..], &pred[4..]).unwrap();
        b.accumulate(&truth[..4], &pred[..4]).unwrap();
        assert_eq!(MetricsReport::from_confusion(a), MetricsReport::from_confusion(b));
    }

    #[test]
    fn rejects_out_of_range_predictions() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0], &[2]).is_err());
    }
}
