use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    Dim(String),
    /// API contract violation (e.g. backward on a non-scalar loss).
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// Malformed or inconsistent input data.
    Data(String),
    /// Numeric failure (NaN/Inf loss, divergence).
    Numeric(String),
    /// Unparseable checkpoint/config file.
    Parse(String),
    /// A requested computation exceeds the configured resource budget.
    Resource(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Resource(m) => write!(f, "resource error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
