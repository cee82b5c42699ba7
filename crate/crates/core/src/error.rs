//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting and inference.
#[derive(Error, Debug, Clone)]
pub enum Error {
    /// An argument violates a precondition (bad sizes, negative counts, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value lies outside the mathematical domain of an operation
    /// (point outside the basis interval, nonmonotone landmarks, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical computation failed (singular covariance, rank-deficient
    /// design, non-finite likelihood, ...).
    #[error("numerical failure: {0}")]
    Computation(String),

    /// A sampler or iterative scheme produced unusable diagnostics.
    #[error("diagnostics: {0}")]
    Diagnostics(String),

    /// Malformed input data, with the offending 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }
}
