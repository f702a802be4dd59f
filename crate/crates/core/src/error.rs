use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch} ({loss})")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("metric input: {0}")]
    Metric(String),
    #[error("node {node} is out of range for a {nodes}-node graph")]
    NodeOutOfRange { node: usize, nodes: usize },
    #[error("branch gradient norms requested before any backward pass")]
    NoBackward,
    #[error("i/o on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
