use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] iml_tensor::TensorError),

    #[error("input spatial size {0}x{1} must be a positive multiple of 32")]
    BadInputSize(usize, usize),

    #[error("ground-truth mask is {0}x{1} but the image is {2}x{3}")]
    MaskMismatch(usize, usize, usize, usize),

    #[error("knn graph: k = {k} must be smaller than the node count {m}")]
    KnnTooLarge { k: usize, m: usize },

    #[error("guided mask target {0}x{1} exceeds source {2}x{3}")]
    MaskTargetTooLarge(usize, usize, usize, usize),

    #[error("effective receptive field needs at least one probe image")]
    EmptyProbes,

    #[error("level features mismatch: {0}")]
    LevelMismatch(String),

    #[error("composite loss requires the graph-metric term during training")]
    MissingGmnTerm,
}

pub type Result<T> = std::result::Result<T, NetError>;
