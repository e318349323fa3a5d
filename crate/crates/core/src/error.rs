use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be symmetric positive definite failed its Cholesky
    /// factorization, even after one jitter retry.
    #[error("matrix `{role}` is not positive definite")]
    NotPositiveDefinite { role: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Truncation bound so deep in the tail that the truncated mass underflows.
    #[error("truncated-normal mass below {mass:e}; rescale the variable or check the bound")]
    TailUnderflow { mass: f64 },

    #[error("categorical weights are all zero")]
    DegenerateWeights,

    #[error("all chains failed: {0}")]
    AllChainsFailed(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("convergence diagnostic error: {0}")]
    Diagnostic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
