use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PeyeError>;

#[derive(Debug, Error)]
pub enum PeyeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid synthetic body spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rank-deficient point configuration: {0}")]
    RankDeficient(String),

    #[error("zero-probability bin {bin} is occupied and xi = 0; use a positive xi")]
    DivisionGuard { bin: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite loss at step {step} (term {term}); offending samples: {sample_ids:?}")]
    NonFiniteLoss {
        step: usize,
        term: String,
        sample_ids: Vec<String>,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl PeyeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PeyeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        PeyeError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

macro_rules! invalid_input {
    ($($arg:tt)*) => {
        $crate::error::PeyeError::InvalidInput(format!($($arg)*))
    };
}

macro_rules! invalid_config {
    ($($arg:tt)*) => {
        $crate::error::PeyeError::InvalidConfig(format!($($arg)*))
    };
}

pub(crate) use invalid_config;
pub(crate) use invalid_input;
