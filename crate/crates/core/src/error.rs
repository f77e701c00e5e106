use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place {count} objects without overlap after {attempts} attempts")]
    Placement { count: usize, attempts: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("scene object sets differ: {0}")]
    ObjectMismatch(String),

    #[error("pair {id}: missing partner file {missing}")]
    MissingPartner { id: String, missing: PathBuf },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File { path: path.into(), message: message.to_string() }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { expected: expected.to_string(), got: got.to_string() }
    }
}
