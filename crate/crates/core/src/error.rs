use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("pool exhausted: requested {requested} distinct subjects, only {available} exist")]
    PoolExhausted { requested: u64, available: u64 },

    #[error("role ranges overlap: {0} and {1}")]
    OverlappingRoles(String, String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient at step {step}")]
    NonFinite { step: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unseen token {0}")]
    UnseenToken(u32),

    #[error("too few tokens with a defined diversity index: {0} (need at least 3)")]
    TooFewTokens(usize),

    #[error("malformed record at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
