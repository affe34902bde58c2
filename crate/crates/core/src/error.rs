use gpm_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpmError {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config line {line}: key `{key}`: {msg}")]
    Config {
        key: String,
        line: usize,
        msg: String,
    },

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GpmError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> GpmError {
    GpmError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> GpmError + '_ {
    move |source| GpmError::Io {
        path: path.display().to_string(),
        source,
    }
}
