use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum LtfeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LtfeError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::LtfeError::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::LtfeError::Domain(format!($($arg)*)) };
}
macro_rules! numerical_err {
    ($($arg:tt)*) => { $crate::error::LtfeError::Numerical(format!($($arg)*)) };
}
pub(crate) use {domain_err, numerical_err, shape_err};
