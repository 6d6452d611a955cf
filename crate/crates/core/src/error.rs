use std::path::PathBuf;

/// Errors produced by the guidance laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at batch sample {index}: {detail}")]
    NonFiniteLoss { index: usize, detail: String },

    #[error("non-finite sampler state at step {step} (sigma = {sigma})")]
    NonFiniteState { step: usize, sigma: f64 },

    #[error("guidance mode `{mode}` requires {needed} guide model(s), got {got}")]
    MissingGuide {
        mode: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::MissingGuide { .. } => ErrorClass::Usage,
            Error::NonFiniteLoss { .. } | Error::NonFiniteState { .. } => ErrorClass::Numeric,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
