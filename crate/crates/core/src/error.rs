//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the numerics, model, estimation, learning, control and
/// simulation layers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix expected to be symmetric is not (beyond tolerance).
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// LU factorization found no usable pivot.
    #[error("matrix is singular to working precision (column {column})")]
    Singular { column: usize },

    /// A scalar or structural parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The state estimator could not continue (e.g. covariance repair failed).
    #[error("estimator failure: {0}")]
    Estimator(String),

    /// Gaussian-process training or prediction failed.
    #[error("gaussian process failure: {0}")]
    Gp(String),

    /// The QP solver did not reach an optimum.
    #[error("qp solver failure: {message}; problem dump: {dump}")]
    Solver { message: String, dump: String },

    /// Simulated glucose left the physiologically meaningful range.
    #[error("simulation diverged at step {step}: blood glucose {bg:.1} mg/dL")]
    Diverged { step: usize, bg: f64 },

    /// Run configuration failed validation.
    #[error("configuration error: {0}")]
    Config(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
