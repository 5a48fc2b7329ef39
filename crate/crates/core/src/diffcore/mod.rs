//! Differentiable dense-tensor substrate: tensors, parameters, the tape and
//! a finite-difference checker.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, CheckReport, GradCheck};
pub use param::Parameter;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{jsd_row, softmax_rows};
