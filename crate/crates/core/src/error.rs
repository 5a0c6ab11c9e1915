use thiserror::Error;

/// Errors raised by the numerical and geometric routines.
///
/// Audit outcomes are never errors: a failed check is a report row. These
/// variants cover malformed inputs and queries that leave the sampled domain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("below grid resolution: {0}")]
    Resolution(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error at `{path}`: {message}")]
    Json { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
