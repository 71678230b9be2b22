//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data handling, kernel evaluation, and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("inconsistent bag label for bag '{0}'")]
    InconsistentBagLabel(String),

    #[error("no samples in input")]
    NoSamples,

    #[error("non-finite value in column '{col}' at row {row}")]
    NonFinite { col: String, row: usize },

    #[error("zero-variance feature '{0}' (use drop_constant to discard it)")]
    ZeroVariance(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("combinatorial guard exceeded: {0} selector combinations")]
    TooManySelectors(u64),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by malformed input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::NoConvergence(_) | Error::Numerical(_) | Error::TooManySelectors(_)
        )
    }
}
