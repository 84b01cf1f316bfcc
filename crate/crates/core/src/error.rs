//! Error types shared across the estimation pipeline.

use thiserror::Error;

/// Errors raised by model fitting, moment evaluation and estimation.
#[derive(Debug, Error, Clone)]
pub enum GmetaError {
    /// Dimensions of supplied vectors/matrices do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A design or moment Jacobian is rank deficient, so the target
    /// parameter is not identified from the supplied information.
    #[error("identifiability failure: {0}")]
    Identifiability(String),

    /// An iterative solver ran out of iterations. Carries the last iterate
    /// and the objective (or deviance) trace so callers can inspect how far
    /// it got.
    #[error("failed to converge after {iterations} iterations (last change {last_change:.3e})")]
    Convergence {
        iterations: usize,
        last_change: f64,
        last_iterate: Vec<f64>,
        objective_trace: Vec<f64>,
    },

    /// A logistic fit diverged, which is the numerical signature of
    /// complete or quasi-complete separation.
    #[error("separation detected: |coefficient| exceeded {bound} during fitting")]
    Separation { bound: f64 },

    /// A dispersion parameter was required but absent, non-positive, or the
    /// standardized-outcome identity could not be applied.
    #[error("dispersion error: {0}")]
    Dispersion(String),

    /// A study covariance matrix was required but not supplied.
    #[error("study {study} has no covariance matrix")]
    MissingCovariance { study: usize },

    /// A study covariance matrix could not be inverted.
    #[error("covariance matrix of study {study} is singular or indefinite")]
    SingularCovariance { study: usize },

    /// The requested operation is not defined for this family.
    #[error("unsupported family: {0}")]
    UnsupportedFamily(String),

    /// A correlation matrix is not positive definite.
    #[error("correlation matrix is not positive definite: {0}")]
    Correlation(String),

    /// Outcome values outside the family support, invalid column maps, etc.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GmetaError>;
