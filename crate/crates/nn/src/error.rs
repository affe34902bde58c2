use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by `{op}`")]
    NumericFailure { op: &'static str },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> NnError {
    NnError::InvalidArgument(msg.into())
}
