use std::io;

use thiserror::Error;

pub type Result<T, E = MofaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MofaError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("channel slice [{lo}, {hi}) out of range for {channels} channels")]
    SliceError { lo: usize, hi: usize, channels: usize },
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("stage `{0}` not found in graph")]
    Stage(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("missing weights for `{0}`")]
    MissingWeights(String),
    #[error("report has no layers")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MofaError {
    pub(crate) fn mismatch(node: impl Into<String>, detail: impl Into<String>) -> Self {
        MofaError::ShapeMismatch {
            node: node.into(),
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for MofaError {
    fn from(e: serde_json::Error) -> Self {
        MofaError::Parse(e.to_string())
    }
}
