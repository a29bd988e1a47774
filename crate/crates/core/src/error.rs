use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },

    #[error("backward called before any forward pass was recorded")]
    NoForward,

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss encountered at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("unsupported artifact version: found {found:?}, expected {expected:?}")]
    ArtifactVersion { found: String, expected: String },

    #[error("artifact checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ArtifactChecksum { stored: u32, computed: u32 },

    #[error("artifact truncated: {0}")]
    ArtifactTruncated(String),

    #[error("malformed artifact: {0}")]
    ArtifactFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Whether this error concerns a model artifact (load, save or import).
    pub fn is_artifact(&self) -> bool {
        matches!(
            self,
            Error::ArtifactVersion { .. }
                | Error::ArtifactChecksum { .. }
                | Error::ArtifactTruncated(_)
                | Error::ArtifactFormat(_)
        )
    }
}
