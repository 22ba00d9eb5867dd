use std::path::PathBuf;

use densup_tensor::{CheckpointError, TensorError};
use thiserror::Error;

use crate::geometry::BoxFormat;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("box {index} {coords:?} is invalid in {format:?} format")]
    InvalidBox {
        index: usize,
        coords: [f64; 4],
        format: BoxFormat,
    },

    #[error("box format mismatch: {0:?} vs {1:?}")]
    FormatMismatch(BoxFormat, BoxFormat),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint does not match the architecture: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("malformed document: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
