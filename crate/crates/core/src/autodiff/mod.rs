//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{ElementwiseOp, Gradients, Tape, Var};
pub use tensor::Tensor;
