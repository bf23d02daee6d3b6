use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("rejected input: {0}")]
    InvalidInput(String),
    /// A binary file did not match its expected layout.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    /// A configuration or dataset setup problem detected before training.
    #[error("configuration error: {0}")]
    Config(String),
    /// A checkpoint could not be loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// A loss evaluated to NaN or infinity; the step was aborted.
    #[error("non-finite loss in {stage} step {step}: {diagnostics}")]
    NonFinite {
        stage: String,
        step: u64,
        diagnostics: String,
    },
    /// A file could not be read or written.
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// Attaches `path` to a failure of a file operation.
pub(crate) fn at_path<T>(path: &Path, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}
