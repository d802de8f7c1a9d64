use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error in {what}: {detail}")]
    Numeric { what: String, detail: String },

    /// Phantom description is not renderable.
    #[error("phantom spec error: {0}")]
    Spec(String),

    /// Malformed on-disk data (TSR1, CKPT1, manifests, CSV, config).
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint does not fit the network it is loaded into.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { what: what.into(), detail: detail.into() }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
