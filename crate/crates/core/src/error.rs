use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file does not follow the expected layout (bad header, bad magic).
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Checksum mismatch or a payload that cannot have been produced by the encoder.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A quantized symbol does not fit the coder's integer range.
    #[error("symbol out of range: {0}")]
    Range(String),

    /// A loss component or gradient became non-finite.
    #[error("training error in {component} at step {step}: {message}")]
    Training {
        component: String,
        step: u64,
        message: String,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn truncated(what: &str) -> Self {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated {what}"),
        ))
    }
}
