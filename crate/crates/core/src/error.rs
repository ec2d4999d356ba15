use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value produced by layer {layer} ({kind})")]
    NumericOverflow { layer: usize, kind: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: non-finite loss at episode {episode}, step {step}")]
    Diverged { episode: usize, step: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("action {action} is not valid when holding={holding}")]
    InvalidAction { action: String, holding: bool },

    #[error("cannot parse network name `{name}`: {reason} (valid families: MLP, GRU, LSTM, CNN)")]
    SpecParse { name: String, reason: String },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight file version {found} is not supported (expected {expected})")]
    WeightVersion { found: u32, expected: u32 },

    #[error("weight file is for `{found}` but network is `{expected}`")]
    WeightSpecMismatch { found: String, expected: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
