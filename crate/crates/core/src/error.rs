use thiserror::Error;

use crate::learner::RunRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Domain(String),

    /// A closed loop (or a Lyapunov operator) that must be Schur stable is not.
    #[error("unstable matrix in {context}: spectral radius {rho:.6} >= 1")]
    Instability { context: &'static str, rho: f64 },

    #[error("{context} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("initial gain rejected: {0}")]
    Initialization(String),

    #[error("safeguard triggered at iteration {iteration}: spectral radius {rho:.6} >= {target:.6}")]
    SafeguardTriggered {
        iteration: usize,
        rho: f64,
        target: f64,
    },

    /// Too many consecutive rejected proposals. Carries the accepted iterates so far.
    #[error("SGD stalled at iteration {iteration} after {rejections} consecutive rejected steps")]
    Stalled {
        iteration: usize,
        rejections: usize,
        partial: Box<RunRecord>,
    },

    #[error("inconclusive diagnostic: {0}")]
    Inconclusive(String),

    #[error("diagnostic failed: {0}")]
    Diagnostic(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
