//! Segmentation losses. Each returns the mean loss and its exact gradient.

use thiserror::Error;

use crate::layers::sigmoid;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("prediction is {pred}, target is {target}")]
    ShapeMismatch { pred: Shape, target: Shape },
    #[error("prediction at flat offset {0} is not strictly inside (0, 1)")]
    OutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Binary cross-entropy, evaluated on logits during training.
    Bce,
    /// Soft Dice with additive smoothing 1.
    Dice,
}

pub const DICE_SMOOTHING: f64 = 1.0;

fn check<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), LossError> {
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch { pred: pred.shape(), target: target.shape() });
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities; gradient is with respect to
/// `pred`.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), LossError> {
    check(pred, target)?;
    if let Some(i) = pred.data().iter().position(|&p| !(p > T::zero() && p < T::one())) {
        return Err(LossError::OutOfRange(i));
    }
    let n = T::from_usize(pred.shape().len()).expect("count fits");
    let mut total = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let q = T::one() - p;
            total -= t * p.ln() + (T::one() - t) * (-p).ln_1p();
            (-t / p + (T::one() - t) / q) / n
        })
        .collect();
    Ok((total / n, Tensor::from_vec(pred.shape(), grad).expect("finite inside (0, 1)")))
}

/// Mean binary cross-entropy of `sigmoid(logits)`, computed in logit space:
/// `max(z, 0) − z·t + ln(1 + e^{−|z|})`. The gradient is with respect to the
/// logits, `(σ(z) − t) / n`, and never overflows.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), LossError> {
    check(logits, target)?;
    let n = T::from_usize(logits.shape().len()).expect("count fits");
    let mut total = T::zero();
    let grad = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            total += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - t) / n
        })
        .collect();
    Ok((total / n, Tensor::from_vec(logits.shape(), grad).expect("finite")))
}

/// `1 − (2·Σpt + s) / (Σp + Σt + s)` with `s = 1`.
pub fn dice_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), LossError> {
    check(pred, target)?;
    let s = T::lit(DICE_SMOOTHING);
    let two = T::lit(2.0);
    let (mut inter, mut sum_p, mut sum_t) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = two * inter + s;
    let den = sum_p + sum_t + s;
    let grad = target.data().iter().map(|&t| -(two * t * den - num) / (den * den)).collect();
    Ok((T::one() - num / den, Tensor::from_vec(pred.shape(), grad).expect("finite")))
}
