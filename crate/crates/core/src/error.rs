use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A dataset file is missing, truncated or malformed.
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Invalid configuration value or unknown variant.
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Two records that must describe the same samples do not.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("augmentation error: {0}")]
    Augmentation(String),

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite value during {phase} (epoch {epoch}, batch {batch}): {what}")]
    NonFinite {
        phase: String,
        epoch: usize,
        batch: usize,
        what: String,
    },

    /// A checkpoint does not match the expected format or model shape.
    #[error("checkpoint version error: {0}")]
    Version(String),

    /// A pipeline phase aborted.
    #[error("{phase} phase aborted: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline phase it came from. Errors that
    /// already carry a phase are left alone.
    pub(crate) fn in_phase(self, phase: &str) -> Self {
        match self {
            e @ (Error::Phase { .. } | Error::NonFinite { .. }) => e,
            e => Error::Phase {
                phase: phase.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error beneath any phase tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
