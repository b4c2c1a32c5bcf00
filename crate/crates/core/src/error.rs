//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Errors carry enough
//! context (shapes, axes, names) to diagnose a misuse without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("operands belong to different tapes")]
    TapeMismatch,

    #[error("tensor is not tracked on a tape")]
    NotTracked,

    #[error("duplicate tape leaf name {0:?}")]
    DuplicateLeaf(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch} (cases {cases:?})")]
    NonFiniteLoss { epoch: usize, cases: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("NIfTI error: {0}")]
    Nifti(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidArgument`] from anything displayable.
    pub fn invalid(msg: impl std::fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}
