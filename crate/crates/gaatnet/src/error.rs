//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("graph too small: {0}")]
    GraphTooSmall(String),

    #[error("infeasible sampling request: {0}")]
    InfeasibleSampling(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("unknown parameter name: {0}")]
    UnknownParameter(String),

    #[error("parameter {0} is trainable but has no gradient")]
    MissingGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}
