use std::path::PathBuf;

/// Errors raised by the library. Each variant maps onto one process exit
/// class in the command-line front end.
#[derive(Clone, Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error at {path}: {msg}")]
    DataAt { path: PathBuf, msg: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data_at(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::DataAt {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
