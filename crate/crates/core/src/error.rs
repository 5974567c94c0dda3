use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape4,
        rhs: Shape4,
    },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step} (last good checkpoint: {last_checkpoint:?})")]
    NonFiniteLoss {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn for_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

/// Fails with `ShapeMismatch` unless the two shapes are equal.
pub(crate) fn ensure_same(op: &'static str, lhs: Shape4, rhs: Shape4) -> Result<()> {
    if lhs == rhs {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs, rhs })
    }
}
