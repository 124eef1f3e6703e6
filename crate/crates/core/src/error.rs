use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stability bound violated: dt = {dt:e} exceeds the monotone bound {bound:e}")]
    Stability { dt: f64, bound: f64 },

    #[error("coefficient error: {0}")]
    Coefficient(String),

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("expression error at column {column}: {message}")]
    Expr { column: usize, message: String },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }
}
