use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention row")]
    EmptyAttentionRow,
    #[error("empty chunk")]
    EmptyChunk,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid boundaries: {0}")]
    InvalidBoundaries(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence too short: length {len} needs more than {needed}")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
