//! Segmentation losses over probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    /// `1 - soft dice`.
    Dice,
    /// Sum of the two.
    BceDice,
}

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {} and target {} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::domain("loss of an empty prediction"));
    }
    if let Some(v) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::domain(format!("target value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
/// The clamp passes no gradient outside its range.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check(pred, target)?;
    let n = pred.numel() as f64;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let p = pred.to_vec();
    let t = target.to_vec();
    let loss = p
        .iter()
        .zip(&t)
        .map(|(&p, &t)| {
            let q = p.clamp(lo, hi);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n;
    Ok(Tensor::from_op(
        crate::tensor::Shape::scalar(),
        vec![loss],
        "bce",
        &[pred],
        Box::new(move |g, _| {
            let grad = p
                .iter()
                .zip(&t)
                .map(|(&p, &t)| {
                    if p < lo || p > hi {
                        0.0
                    } else {
                        g[0] * (p - t) / (p * (1.0 - p)) / n
                    }
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check(pred, target)?;
    let p = pred.to_vec();
    let t = target.to_vec();
    let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0;
    let num = 2.0 * inter + 1.0;
    Ok(Tensor::from_op(
        crate::tensor::Shape::scalar(),
        vec![1.0 - num / denom],
        "dice",
        &[pred],
        Box::new(move |g, _| {
            let grad = t
                .iter()
                .map(|&ti| -g[0] * (2.0 * ti * denom - num) / (denom * denom))
                .collect();
            vec![Some(grad)]
        }),
    ))
}

pub fn loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    match kind {
        LossKind::Bce => bce_loss(pred, target),
        LossKind::Dice => dice_loss(pred, target),
        LossKind::BceDice => crate::ops::add(&bce_loss(pred, target)?, &dice_loss(pred, target)?),
    }
}
