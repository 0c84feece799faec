//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration is internally inconsistent or out of range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two buffers that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A dense-matrix helper was asked for a frame too large for oracle use.
    #[error("oracle guard: frame length {frame_len} exceeds the dense-matrix bound {bound}")]
    OracleGuard { frame_len: usize, bound: usize },

    /// The receiver produced a non-finite message; the iterate is unusable.
    #[error("non-finite message detected at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    ConfigParse { path: String, message: String },
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
