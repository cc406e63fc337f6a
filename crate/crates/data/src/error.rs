use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed at byte {offset}: {what}")]
    Parse {
        path: PathBuf,
        offset: usize,
        what: String,
    },

    #[error("index references missing entry: {0}")]
    MissingEntry(String),

    #[error("duplicate path in index: {0}")]
    DuplicatePath(String),

    #[error("samples must share dimensions: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),

    #[error("blur kernel must be odd, got {0}")]
    EvenKernel(usize),

    #[error("degenerate generation: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
