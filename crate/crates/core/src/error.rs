use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value failed its domain invariant (bad config, out-of-range probability, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A caller violated an operation's precondition (shape mismatch, negative loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at byte {offset} ({field}): {message}")]
    Parse {
        offset: u64,
        field: &'static str,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
