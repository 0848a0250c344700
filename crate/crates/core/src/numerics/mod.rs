//! Minimal tensor and reverse-mode autodiff core.
//!
//! Dynamically typed shapes, flat row-major storage, and a tape built
//! implicitly out of parent links plus backward closures. Enough for a small
//! transformer: 2-D matmul, elementwise ops, softmax, layer norm, gathers.
//! Generic over `f32` (training) and `f64` (gradient verification).

mod fdcheck;
mod tensor;

pub use fdcheck::finite_diff_check;
pub use tensor::{no_grad, GradGuard, NumericsError, Result, Scalar, Tensor};
