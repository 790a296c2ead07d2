use thiserror::Error;

/// Errors surfaced by geometry, model, solver and optimizer operations.
#[derive(Debug, Error)]
pub enum Error {
    /// The metric (or damped Fisher operator) was not solvable as an SPD system.
    #[error("singular or non-SPD metric: {0}")]
    SingularMetric(String),

    /// A model parameter left its valid domain (e.g. Gamma shape/rate <= 0).
    #[error("parameter outside valid domain: {0}")]
    DomainError(String),

    /// An integrated trajectory left the model's valid parameter domain.
    #[error("trajectory left the valid domain: {0}")]
    DomainExit(String),

    /// NaN or Inf encountered in an intermediate state.
    #[error("non-finite state: {0}")]
    NonFiniteState(String),

    /// Incompatible array shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Flat parameter vector length does not match the network.
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// A CG denominator went non-positive beyond round-off.
    #[error("conjugate gradient breakdown: {0}")]
    Breakdown(String),

    /// Too many network outputs hit the clamp range for BCE/MCE coefficients.
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    /// Invalid experiment configuration.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
