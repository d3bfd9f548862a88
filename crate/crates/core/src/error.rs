//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition (dimensions, empty sets, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model failed its structural invariants on construction or load.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A covariance matrix is not symmetric positive-definite.
    #[error("covariance is not positive-definite: {0}")]
    NotPositiveDefinite(String),

    /// An iterative fixed point did not converge within its budget.
    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    /// EM produced a component with no responsibility mass.
    #[error("EM component {component} lost all samples (K too large for this data)")]
    EmptyComponent { component: usize },

    /// A state of the fitted model was never visited by any demonstration.
    #[error("state {0} never visited by any demonstration (K too large)")]
    StateNeverVisited(usize),

    /// Decoding found no state sequence with positive probability.
    #[error("no positive-probability state sequence of length {horizon}; blocking final states: {blocked:?}")]
    NoFeasibleSequence { horizon: usize, blocked: Vec<usize> },

    /// A numerical failure during inference or control (underflow, NaN, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A lookup failed (frame id, object id, component id, ...).
    #[error("missing entry: {0}")]
    MissingEntry(String),

    /// Trajectory tracking ended too far from its target.
    #[error("tracking diverged in skill {skill}: terminal residual {residual:.4} exceeds {tolerance:.4}")]
    TrackingDiverged {
        skill: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_model(msg: impl Into<String>) -> Self {
        Error::InvalidModel(msg.into())
    }
}
