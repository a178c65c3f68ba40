//! Pixel confusion counts and the precision / F1 / IoU suite.
//!
//! A metric whose denominator is zero is 1.0: with nothing predicted and
//! nothing present there is nothing to get wrong.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP + FN)`.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn scores(&self) -> Scores {
        Scores {
            precision: self.precision(),
            f1: self.f1(),
            iou: self.iou(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Pixelwise tallies; a prediction at or above `threshold` is positive, a
/// target above 0.5 is positive.
pub fn confusion(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {} and target {} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(confusion_slices(pred.data(), target.data(), threshold))
}

pub(crate) fn confusion_slices(pred: &[f64], target: &[f64], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p >= threshold, t > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Per-image confusion counts of a batch.
pub fn confusion_per_image(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<Vec<ConfusionCounts>> {
    confusion(pred, target, threshold)?;
    let per = pred.numel() / pred.shape().n.max(1);
    Ok((0..pred.shape().n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            confusion_slices(&pred.data()[r.clone()], &target.data()[r], threshold)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Scores of the pooled counts over all pixels.
    #[default]
    Micro,
    /// Mean of per-image scores.
    Macro,
}

/// Accumulates per-image counts and reports either averaging.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    pub total: ConfusionCounts,
    per_image: Vec<Scores>,
}

impl MetricAccumulator {
    pub fn add_batch(&mut self, pred: &Tensor, target: &Tensor, threshold: f64) -> Result<()> {
        for c in confusion_per_image(pred, target, threshold)? {
            self.total += c;
            self.per_image.push(c.scores());
        }
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.per_image.len()
    }

    pub fn scores(&self, averaging: Averaging) -> Scores {
        match averaging {
            Averaging::Micro => self.total.scores(),
            Averaging::Macro => {
                if self.per_image.is_empty() {
                    return ConfusionCounts::default().scores();
                }
                let n = self.per_image.len() as f64;
                let sum = self.per_image.iter().fold(Scores::default(), |a, s| Scores {
                    precision: a.precision + s.precision,
                    f1: a.f1 + s.f1,
                    iou: a.iou + s.iou,
                });
                Scores {
                    precision: sum.precision / n,
                    f1: sum.f1 / n,
                    iou: sum.iou / n,
                }
            }
        }
    }
}
