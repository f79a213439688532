//! Tape-free activations used at inference time and as loss building blocks.

use crate::error::{NnError, Result};
use crate::scalar::Scalar;

fn check_finite<T: Scalar>(logits: &[T], op: &str) -> Result<()> {
    if logits.is_empty() {
        return Err(NnError::Shape(format!("{op} of an empty logit vector")));
    }
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(op.to_string()))
    }
}

/// `ln Σ exp(l_k)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> Result<T> {
    check_finite(logits, "log_sum_exp")?;
    Ok(lse_unchecked(logits))
}

pub(crate) fn lse_unchecked<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

/// Class probabilities `exp(l_i) / Σ exp(l_k)`.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite(logits, "softmax")?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability that a sample is real when a zero logit stands for the fake
/// class: `Z / (Z + 1)` with `Z = Σ exp(l_k)`.
///
/// Evaluated as the logistic function of `ln Z`, so it never overflows.
pub fn real_probability<T: Scalar>(logits: &[T]) -> Result<T> {
    let lse = log_sum_exp(logits)?;
    Ok(sigmoid(lse))
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
