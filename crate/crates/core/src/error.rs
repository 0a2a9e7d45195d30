use thiserror::Error;

/// Errors produced by the change-detection library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("placement rejected: {0}")]
    PlacementRejected(String),
    #[error("placement collides with an existing insertion")]
    CollisionRejected,
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_param(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
