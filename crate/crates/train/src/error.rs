use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] iml_net::NetError),

    #[error(transparent)]
    Data(#[from] iml_data::DataError),

    #[error(transparent)]
    Tensor(#[from] iml_tensor::TensorError),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("training requires a non-empty dataset ({0} is empty)")]
    EmptyDataset(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    Version(u32),

    #[error("checkpoint: truncated at byte {0}")]
    Truncated(usize),

    #[error("checkpoint: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint: missing tensor {0}")]
    MissingTensor(String),

    #[error("checkpoint: tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint: tensor {0} has the wrong element type")]
    TensorType(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;
