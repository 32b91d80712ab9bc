use thiserror::Error;

/// Errors raised by mesh construction, model evaluation and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("invalid material parameters: {0}")]
    Material(String),

    #[error("model evaluation failed at {location}: {message}")]
    ModelEvaluation { location: String, message: String },

    #[error("quadrature did not converge: achieved {achieved:e}, requested {requested:e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("Kirchhoff tabulation failed: {0}")]
    Kirchhoff(String),

    #[error("singular linear system (minimum |pivot| {min_pivot:e})")]
    SingularSystem { min_pivot: f64 },

    #[error("iterative solver stalled after {iterations} iterations (residual {residual:e})")]
    IterativeSolver { iterations: usize, residual: f64 },

    #[error("nonlinear pressure solve failed at level {level}: {reason}")]
    NewtonFailure {
        level: usize,
        reason: String,
        residual_history: Vec<f64>,
    },

    #[error("pressure {observed:e} fell below the admissible floor {floor:e} at level {level} (theoretical bound {bound:e}): the configured embedding constant is too optimistic")]
    LowerBoundFalsified {
        level: usize,
        observed: f64,
        floor: f64,
        bound: f64,
    },

    #[error("invalid initial data: {0}")]
    InitialData(String),

    #[error("invalid configuration key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("trajectory integrity error: {0}")]
    Integrity(String),

    #[error("diagnostics input rejected: {0}")]
    Diagnostics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
