//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Forward computations are recorded on a [`Tape`] through [`Var`] handles;
//! [`Tape::backward`] fills gradients for every leaf marked as requiring one,
//! including input images when input gradients are wanted.

mod error;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::norm::BnStats;
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;
