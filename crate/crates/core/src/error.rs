use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },

    #[error("config error at line {line}: key `{key}`: {msg}")]
    Config { key: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}:{line}: {msg}")]
    Data { path: String, line: usize, msg: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(path: impl std::fmt::Display, line: usize, msg: impl Into<String>) -> Self {
        Error::Data { path: path.to_string(), line, msg: msg.into() }
    }

    /// Numeric failures (diverging loss, NaN gradients) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. })
    }
}
