use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: non-finite or out-of-domain value at index {index}")]
    Numeric { op: &'static str, index: usize },

    #[error("invalid configuration field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("audio format error in {path}: {field} {msg}")]
    Format {
        path: PathBuf,
        field: &'static str,
        msg: String,
    },

    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("token id {id} at position {position} is outside the vocabulary of size {size}")]
    Vocabulary {
        id: usize,
        position: usize,
        size: usize,
    },

    #[error("infeasible CTC alignment: {frames} frames cannot emit a target of length {target_len} with {repeats} adjacent repeats")]
    InfeasibleAlignment {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("character error rate undefined for utterance `{utt_id}`: empty reference")]
    EmptyReference { utt_id: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint does not match configuration:\n{0}")]
    ConfigMismatch(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Validation failures (bad config or arguments) as opposed to runtime or data errors.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Json(_) | Error::ConfigMismatch(_)
        )
    }
}
