use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("field `{field}` has {len} tokens, limit is {limit}")]
    FieldTooLong {
        field: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("invalid instance `{id}`: {message}")]
    InvalidInstance { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty retrieval query")]
    EmptyQuery,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("input of length {len} exceeds the {branch} limit of {limit}")]
    TooLong {
        branch: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("non-finite gradient at coordinate {index}")]
    NonFinite { index: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from arithmetic rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
