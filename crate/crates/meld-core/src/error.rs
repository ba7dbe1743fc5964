//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MeldError>;

#[derive(Debug, Error)]
pub enum MeldError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss at step {step} (batch {batch_id})")]
    NonFiniteLoss { step: usize, batch_id: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(String),
}

impl From<hound::Error> for MeldError {
    fn from(e: hound::Error) -> Self {
        MeldError::Wav(e.to_string())
    }
}
