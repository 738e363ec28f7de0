use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input at row {row}, column `{column}`: {reason}")]
    MalformedInput {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("label coding error: {0}")]
    LabelCoding(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid split: {0}")]
    InvalidSplit(&'static str),

    #[error("feature {feature} is not available for routing (row has {available} values)")]
    Routing { feature: usize, available: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("undefined rate: baseline ciphertext count is zero")]
    UndefinedRate,

    #[error("undefined node: instance space is empty")]
    UndefinedNode,

    #[error("unsupported model: {0}")]
    UnsupportedModel(&'static str),

    #[error("integrity error: {0}")]
    Integrity(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("undefined AUC: {0}")]
    UndefinedAuc(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
