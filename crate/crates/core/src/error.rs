use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate size: {0}")]
    DegenerateSize(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus: no decodable images in {0}")]
    EmptyCorpus(PathBuf),

    #[error("mask synthesis failed: {0}")]
    MaskSynthesis(String),

    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),

    #[error("non-finite gradient in parameter `{name}` at iteration {iteration}")]
    NonFiniteGradient { name: String, iteration: usize },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
