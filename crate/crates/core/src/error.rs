use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// The variants mirror the failure classes callers are expected to handle
/// differently: a bad shape is a programming error in the caller, a
/// non-finite value is a numerical failure during a run, a format error
/// points at a corrupted file.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error at node {node} ({op}): {detail}")]
    Numeric {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error in {}: {message}", path.display())]
    FileFormat { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use shape_err;
