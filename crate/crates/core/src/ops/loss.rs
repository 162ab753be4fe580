use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]` before the log.
pub const CLAMP_EPS: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to `prob_pos`.
///
/// The gradient is evaluated at the clamped probability.
pub fn bce_loss<T: Scalar>(prob_pos: &Tensor<T>, label: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if prob_pos.len() != label.len() {
        return Err(Error::Shape(format!("bce_loss: {} probabilities vs {} labels", prob_pos.len(), label.len())));
    }
    if let Some(bad) = label.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::InvalidArgument(format!("bce_loss label {bad:?} is not 0 or 1")));
    }
    let n = T::from_usize(label.len()).expect("count");
    let lo = T::from_f64_lossy(CLAMP_EPS);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(label.len());
    for (&p, &y) in prob_pos.data().iter().zip(label.data()) {
        let p = p.max(lo).min(hi);
        loss = loss - (y * p.ln() + (T::one() - y) * (T::one() - p).ln());
        grad.push((p - y) / (p * (T::one() - p)) / n);
    }
    Ok((loss / n, Tensor::from_vec(prob_pos.shape(), grad)?))
}
