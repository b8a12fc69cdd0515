//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions do not agree with the model.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input violates a domain constraint (negative factor entry,
    /// non-positive variance, weight outside (0,1], ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix required to be invertible is singular or has reciprocal
    /// condition number below the working threshold.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A point violates a hard feasibility constraint (uniform-likelihood
    /// residual bound, expected where only feasible inputs make sense).
    #[error("infeasible point: {0}")]
    Infeasible(String),

    /// An iterative routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A data file could not be parsed. Carries the 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
