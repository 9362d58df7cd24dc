use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class {class} needs {needed} samples but only {available} are left in the pool")]
    InsufficientClass {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("cannot sample {requested} nodes: only {available} have positive probability")]
    SamplingShortfall { requested: usize, available: usize },

    #[error("every node is labeled; no node can receive the redistributed probability")]
    NoRecipients,

    #[error("bad magic number: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated input: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("image file declares {images} items but label file declares {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("declared size overflows: {0}")]
    SizeOverflow(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
