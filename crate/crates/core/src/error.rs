use std::path::PathBuf;

use tasnet_autodiff::AutodiffError;
use thiserror::Error;

use crate::audio::AudioError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-parsable failure class.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Audio(_) => "audio",
            Error::Autodiff(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Json { .. } | Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Model(_) => "model",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged(_) => "diverged",
            Error::Metric(_) => "metric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
