//! Cross-modal distillation from a discriminative teacher modality into a
//! weak student modality, with graph-level structural alignment, dual
//! hard-negative memory banks and prediction-space distillation.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod contrastbank;
pub mod datagen;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod graphalign;
pub mod objective;
pub mod trainer;

pub use diffcore::{Parameter, Tape, Tensor, Var};
pub use error::{Error, Result};
