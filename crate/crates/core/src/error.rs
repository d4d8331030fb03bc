use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum MfError {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value violates a documented constraint (non-positive variance, empty grid, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Cholesky factorization failed even after the jitter escalation ran out.
    /// `min_eigenvalue` is the smallest eigenvalue estimate of the matrix that refused to factor.
    #[error(
        "matrix is not positive definite after {attempts} jitter attempts \
         (min eigenvalue estimate {min_eigenvalue:.3e})"
    )]
    Factorization {
        min_eigenvalue: f64,
        attempts: usize,
    },

    /// A mathematical precondition of the requested computation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Internal cross-check failed (e.g. an observed value above the exhaustive optimum).
    #[error("inconsistent state: {0}")]
    Inconsistent(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MfError>;
