use std::path::PathBuf;

use crate::geometry::{BoxError, InvalidLossConfig};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Schema {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {image_id}: {message}")]
    InvalidRecord { image_id: String, message: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid term bank: {0}")]
    InvalidTermBank(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Box(#[from] BoxError),

    #[error(transparent)]
    LossConfig(#[from] InvalidLossConfig),

    #[error("knowledge provider: {0}")]
    Provider(String),

    #[error("knowledge expansion failed at {image_id}: {message}; pending: {}", pending.join(", "))]
    Expansion {
        image_id: String,
        message: String,
        pending: Vec<String>,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss on batch [{}]", sample_ids.join(", "))]
    NonFiniteLoss { sample_ids: Vec<String> },

    #[error("evaluation refused: {}", problems.join("; "))]
    PredictionMismatch { problems: Vec<String> },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
