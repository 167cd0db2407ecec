//! Dense `f64` tensors and a single-use reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] through [`Var`] handles and differentiated with
//! [`Tape::backward`].

mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, rel_err, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
