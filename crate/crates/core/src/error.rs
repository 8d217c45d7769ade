use thiserror::Error;

use crate::tensor::Shape4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: Shape4,
        actual: Shape4,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at byte offset {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    #[error("non-finite values produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
