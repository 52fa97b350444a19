use thiserror::Error;

/// Errors raised by operators, builders and suites.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operator argument is out of its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A configuration or network description is inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// A cost query lacks a field required by its operator kind.
    #[error("query error: {0}")]
    Query(String),
    /// The caller misused an API (for example, backward from a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! query_err {
    ($($arg:tt)*) => { $crate::error::Error::Query(format!($($arg)*)) };
}
pub(crate) use {config_err, dim_err, param_err, query_err};
