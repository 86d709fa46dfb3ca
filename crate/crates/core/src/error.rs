use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("alignment error: {left} has {left_lines} lines but {right} has {right_lines}")]
    Alignment {
        left: String,
        left_lines: usize,
        right: String,
        right_lines: usize,
    },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("storage error on {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
