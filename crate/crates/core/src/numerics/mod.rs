//! Dense kernels, activations, loss, optimizer and gradient checking.
//!
//! Everything is `f64` and row-major. Shapes are validated once per call, not
//! per element.

mod activations;
mod adam;
mod gradcheck;
mod loss;
mod matrix;

pub use activations::{relu, sigmoid, sigmoid_scalar, softmax_all, softmax_in_place, softmax_rows};
pub use adam::{adam_update, AdamState};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, GradFailure, REL_ERROR_FLOOR};
pub use loss::bce_loss;
pub use matrix::{axpy, dot, matmul, Matrix};
