use super::activations::sigmoid_scalar;
use super::Matrix;
use crate::error::{shape_err, Result};

/// Mean binary cross-entropy over the positions selected by `mask` (nonzero
/// entries), computed from logits in the log-sum-exp form
/// `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
///
/// Returns the loss and its gradient with respect to `logits`. With an empty
/// selection the loss is 0 and the gradient vanishes.
pub fn bce_loss(logits: &Matrix, targets: &Matrix, mask: Option<&Matrix>) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return shape_err("bce_loss", logits.shape(), targets.shape());
    }
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return shape_err("bce_loss mask", logits.shape(), m.shape());
        }
    }
    let included = |i: usize| mask.is_none_or(|m| m.data()[i] != 0.0);
    let count = (0..logits.len()).filter(|&i| included(i)).count();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, (&x, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        if !included(i) {
            continue;
        }
        total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        grad.data_mut()[i] = (sigmoid_scalar(x) - t) * inv;
    }
    Ok((total * inv, grad))
}
