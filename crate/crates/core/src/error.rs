//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("amplitude vector is not normalized: |c| = {norm:.17e}")]
    NotNormalized { norm: f64 },

    #[error("constraint value {value:.17e} deviates from 1 beyond tolerance {tol:.3e}")]
    ConstraintViolation { value: f64, tol: f64 },

    #[error("matrix is not Hermitian: max |M - M^H| entry = {residual:.3e}")]
    NotHermitian { residual: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("pair index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("operation requires a position-space harmonic oscillator basis")]
    UnsupportedBasis,

    #[error("analytic gradients are required here but the observable only supports finite differences")]
    MissingGradients,

    #[error(
        "implicit solver stalled: residual {residual:.3e} after {iterations} iterations (step size {dt:.3e})"
    )]
    SolverStalled {
        residual: f64,
        iterations: usize,
        dt: f64,
    },

    #[error("integration failed at step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal consistency check failed: {0}")]
    Integrity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
