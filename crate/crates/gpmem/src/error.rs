//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel expression references a parameter name that is missing from
    /// the hyperparameter table.
    #[error("unresolved parameter name `{0}`")]
    UnresolvedParam(String),

    /// A kernel evaluation or likelihood computation produced a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Cholesky factorization failed even after jitter escalation.
    #[error("matrix not positive definite; attempted jitter levels {attempted:?}")]
    NotPositiveDefinite { attempted: Vec<f64> },

    /// Invalid configuration (unknown scope, bad schedule, bad prior, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Text parsing failure (kernel expressions, queries, sample logs).
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    /// The wrapped source function failed or returned a non-finite value.
    #[error("source function failed at x = {x}: {message}")]
    Source { x: f64, message: String },

    /// Dataset loading or validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric gradient or optimizer step failed.
    #[error("numeric error in parameter `{param}`: {message}")]
    Numeric { param: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
