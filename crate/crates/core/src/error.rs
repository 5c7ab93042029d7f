use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    /// Malformed input rejected before any computation (bad grid, mismatched shapes).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// Inconsistent configuration (δ > T, CFL violation, misaligned partition, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The regression could not be solved even after ridge regularization.
    #[error("regression diagnostics at step {step}: {detail}")]
    Regression { step: usize, detail: String },

    /// Non-finite values appeared in the backward recursion.
    #[error("solver diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("unsupported dimension: expected {expected}, got {got}")]
    UnsupportedDimension { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical instability: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
