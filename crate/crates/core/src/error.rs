use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{malformed} of {total} lines in {path} are malformed (tolerance exceeded)")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("invalid example {id}: {message}")]
    InvalidExample { id: String, message: String },

    #[error("example {id} has no intent label")]
    Unlabeled { id: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training set contains a single class ({0})")]
    SingleClass(String),

    #[error("missing judgments for sampled ids: {}", .0.join(", "))]
    MissingJudgments(Vec<String>),

    #[error("no derangement exists over a label set of size {0}")]
    NoDerangement(usize),

    #[error("backend failure at batch {index}: {message}")]
    Backend { index: usize, message: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(index: usize, message: impl std::fmt::Display) -> Self {
        Error::Backend {
            index,
            message: message.to_string(),
        }
    }

    /// Whether the error stems from bad input or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Backend { .. })
    }
}
