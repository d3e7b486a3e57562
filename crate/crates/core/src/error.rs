use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Dataset content is unusable (missing classes, bad labels).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed binary or text input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse { offset, message: msg.into() }
    }
}
