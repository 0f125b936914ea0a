//! Minimal reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; parameters live in
//! a [`ParamStore`] and are bound onto the tape by name. After
//! [`Tape::backward`], [`ParamStore::accumulate`] adds the gradients of that
//! store's bindings.

mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamMode, ParamStore, CHECKPOINT_FORMAT};
pub use tape::{peak_tape_bytes, reset_peak_tape_bytes, Grads, Tape, Var};
pub use tensor::{argmax, log_softmax, softmax, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
