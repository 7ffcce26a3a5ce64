//! 64-bit numeric substrate: dense arrays, differentiable kernels with
//! hand-written backward passes, finite-difference checking, checkpoints
//! and the optimizer. There is no autodiff graph; every composite keeps its
//! own forward context and chains backward calls explicitly.

mod array;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod params;

pub use array::DenseArray;
pub use params::{xavier_uniform, ParamBundle, ParamEntry};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("axis {axis} out of bounds for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}
