use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by pretrained-model backends and their mocks.
#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("unknown {role} backend `{backend}`")]
    UnknownBackend { role: &'static str, backend: String },
    #[error("{role} backend `{backend}` failed: {reason}")]
    Backend {
        role: &'static str,
        backend: String,
        reason: String,
    },
    #[error("{role} input has shape {got:?}, expected {expected:?}")]
    Shape {
        role: &'static str,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("frozen {role} changed during training (fingerprint {before:016x} -> {after:016x})")]
    FrozenBackendMutated {
        role: &'static str,
        before: u64,
        after: u64,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
