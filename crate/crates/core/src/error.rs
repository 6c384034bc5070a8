use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid state: {0}")]
    State(String),
    #[error("unsupported in this mode: {0}")]
    UnsupportedMode(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: u64, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
