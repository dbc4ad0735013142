use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface, tagged by the stage that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sigproc: invalid filter spec: {0}")]
    InvalidFilter(String),

    #[error("sigproc: {0}")]
    Signal(String),

    #[error("dataset: format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("dataset: alignment error: {0}")]
    Alignment(String),

    #[error("dataset: protocol error: {0}")]
    Protocol(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("autodiff: shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("autodiff: non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("model: {0}")]
    Model(String),

    #[error("model: geometry mismatch: {0}")]
    Geometry(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("train: {0}")]
    Train(String),

    #[error("train: diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("eval: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by the caller's inputs or configuration
    /// rather than by a numerical or runtime problem.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidFilter(_)
                | Error::Format { .. }
                | Error::Alignment(_)
                | Error::Protocol(_)
                | Error::Geometry(_)
                | Error::ModelFile(_)
                | Error::Config(_)
                | Error::Io { .. }
        )
    }
}
