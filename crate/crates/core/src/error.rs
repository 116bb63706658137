use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports. Variants map one-to-one onto the
/// error categories printed by the command line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("prune error: {0}")]
    Prune(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error in `{term}`: {detail}")]
    Numeric { term: String, detail: String },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Size(_) => "SizeError",
            Error::Shape(_) => "ShapeError",
            Error::Data(_) => "DataError",
            Error::Domain(_) => "DomainError",
            Error::Config(_) => "ConfigError",
            Error::Spec(_) => "SpecError",
            Error::Prune(_) => "PruneError",
            Error::Format(_) => "FormatError",
            Error::Numeric { .. } => "NumericError",
            Error::Oracle(_) => "OracleError",
            Error::Io(_) => "IoError",
        }
    }
}

macro_rules! size_err {
    ($($arg:tt)*) => { $crate::error::Error::Size(format!($($arg)*)) };
}
pub(crate) use size_err;
