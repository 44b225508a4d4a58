use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants line up with the command-line exit codes: configuration
/// problems, data problems and numerical aborts are kept apart so callers
/// can react to each.
#[derive(Debug, Error)]
pub enum Error {
    /// A geometric quantity outside its domain (non-positive depth, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Tensor or map dimensions that do not agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// Inconsistent or invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, corrupt or mismatched dataset / checkpoint content.
    #[error("data error: {0}")]
    Data(String),
    /// A loss or gradient became non-finite.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Shape(_) | Error::Domain(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
