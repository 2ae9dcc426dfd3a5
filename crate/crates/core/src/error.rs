use thiserror::Error;

/// Errors raised anywhere in the sensitivity pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A value object could not be built because its invariants do not hold.
    #[error("invalid construction: {0}")]
    Construction(String),

    /// The external score process misbehaved. `raw` carries the offending reply, if any.
    #[error("transport error: {message}{}", raw.as_deref().map(|r| format!(" (raw reply: {r:?})")).unwrap_or_default())]
    Transport { message: String, raw: Option<String> },

    /// A non-finite value appeared while stepping an integrator.
    #[error("integration failed at step {step}: {message}")]
    Integration { step: usize, message: String },

    /// The operation was called with an unsupported combination of inputs.
    #[error("usage error: {0}")]
    Usage(String),

    /// The run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn construction(msg: impl Into<String>) -> Self {
        Error::Construction(msg.into())
    }

    pub(crate) fn transport(msg: impl Into<String>, raw: Option<String>) -> Self {
        Error::Transport {
            message: msg.into(),
            raw,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
