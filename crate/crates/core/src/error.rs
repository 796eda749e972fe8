use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An exhaustive computation would exceed its configured budget.
    #[error("capacity exceeded: {what} needs {required}, budget is {budget}")]
    Capacity {
        what: &'static str,
        required: u128,
        budget: u128,
    },

    /// A pluggable component broke its output contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Capacity { .. } => "capacity",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
