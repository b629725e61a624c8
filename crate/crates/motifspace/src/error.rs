use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure categories surfaced
/// by the CLI: anything here exits with code 1 and a category prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("midi parse error at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
