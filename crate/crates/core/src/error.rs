use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, widths or settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Broken internal invariant; indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),

    /// Malformed, truncated or corrupt bitstream.
    #[error("decode error: {0}")]
    Decode(String),

    /// Bitstream or state produced by a different model.
    #[error("model mismatch: stream expects {expected}, checkpoint is {found}")]
    ModelMismatch { expected: String, found: String },

    /// Unreadable or unsupported input data.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
