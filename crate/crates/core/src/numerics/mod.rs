//! Dense tensors, reverse-mode autodiff and finite-difference checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error};
pub use tape::{compensated_sum, Activation, Tape, Var};
pub use tensor::Tensor;
