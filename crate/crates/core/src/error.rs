use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported container format in {path}: {reason}")]
    Version { path: PathBuf, reason: String },

    #[error("corrupt container {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("cannot decode frame {index} ({path})")]
    Decode { path: PathBuf, index: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite value at training step {step}")]
    Diverged { step: u64 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
