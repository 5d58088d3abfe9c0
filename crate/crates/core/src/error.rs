//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HcdError {
    /// Incompatible array shapes for an operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file could not be parsed. Lines are 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Filtering or loading produced no usable data.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// An id was outside its valid range.
    #[error("{what} id {id} out of range (len {len})")]
    Index {
        what: &'static str,
        id: usize,
        len: usize,
    },

    /// A metric has no defined value on this input.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training produced non-finite values.
    #[error("training diverged: parameter {param} contains non-finite values")]
    Divergence { param: String },

    /// A checkpoint was applied to a dataset it was not trained on.
    #[error("checkpoint fingerprint {checkpoint:#018x} does not match dataset fingerprint {dataset:#018x}")]
    FingerprintMismatch { checkpoint: u64, dataset: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HcdError>;
