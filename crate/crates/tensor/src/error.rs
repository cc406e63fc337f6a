use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// A primitive received inputs whose shapes it cannot operate on.
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: root tensor is not on the active tape")]
    RootNotOnTape,

    #[error("grad_check: function output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("{primitive}: invalid attribute: {detail}")]
    BadAttribute {
        primitive: &'static str,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

impl TensorError {
    pub fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            primitive,
            detail: detail.into(),
        }
    }

    pub fn attr(primitive: &'static str, detail: impl Into<String>) -> Self {
        TensorError::BadAttribute {
            primitive,
            detail: detail.into(),
        }
    }
}
