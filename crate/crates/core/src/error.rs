use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum DavitError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DavitError {
    /// Process exit code: 1 for runtime/numeric failures, 2 for usage and
    /// configuration problems (which includes bad shapes and bad files).
    pub fn exit_code(&self) -> i32 {
        match self {
            DavitError::Numeric(_) | DavitError::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DavitError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::DavitError::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::DavitError::Config(format!($($arg)*)) };
}
macro_rules! geometry_err {
    ($($arg:tt)*) => { $crate::error::DavitError::Geometry(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use geometry_err;
pub(crate) use shape_err;
