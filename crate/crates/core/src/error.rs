use std::path::PathBuf;

/// Crate-wide error type for fallible, data-dependent operations.
///
/// Contract violations (shape mismatches, mixed tapes, non-simplex rows) are
/// programming errors and panic instead; see the module docs of `tensor` and
/// `losses`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("scene generation error: {0}")]
    Scene(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    Verify(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
