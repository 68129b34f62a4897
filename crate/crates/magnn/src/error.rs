//! Crate-wide error type: every checked failure mode names enough context
//! (shapes, rows, parameter keys) to diagnose the call site without a debugger.

use thiserror::Error;

/// Unified error for tensor, data, model, training, and metric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that were required to agree did not.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape was structurally wrong for the operation (rank, size, bounds).
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// A NaN or infinity appeared where all values must stay finite.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Backward was asked to differentiate a non-scalar node.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    /// A value in a delimited text file failed to parse.
    #[error("ingest {path}: row {row}, column {col}: {msg}")]
    Ingest {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    /// Configuration or argument rejected before any work started.
    #[error("config: {0}")]
    Config(String),

    /// An API contract was violated by the caller (documented precondition).
    #[error("contract: {0}")]
    Contract(String),

    /// Checkpoint file could not be read, parsed, or matched to its config.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A metric was mathematically undefined on the given inputs.
    #[error("metrics: {0}")]
    Metrics(String),

    /// Training aborted (non-finite gradient, empty split, and similar).
    #[error("train: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
