use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WinnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WinnError {
    /// Inconsistent shapes, presets, or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value appeared, or an optimizer received non-finite input.
    #[error("numeric error at {location}: {message}")]
    Numeric { location: String, message: String },

    /// Second-order differentiation was requested through a primitive whose
    /// backward is not itself differentiable.
    #[error("capability error: primitives without re-differentiable backward: {0}")]
    Capability(String),

    #[error("parse error in {what} at byte offset {offset}: {message}")]
    Parse {
        what: String,
        offset: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint load failed: {0}")]
    CheckpointLoad(#[from] crate::checkpoint::LoadError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WinnError {
    pub fn config(msg: impl Into<String>) -> Self {
        WinnError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        WinnError::Usage(msg.into())
    }

    pub fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        WinnError::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WinnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage and configuration problems (including resuming a checkpoint
    /// under a different configuration) are the caller's fault; everything
    /// else is a runtime failure. The CLI maps these to exit codes 1 and 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            WinnError::Usage(_)
                | WinnError::Config(_)
                | WinnError::CheckpointLoad(crate::checkpoint::LoadError::ConfigHash)
        )
    }
}
