//! Minimal dense-tensor reverse-mode differentiation in double precision.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
