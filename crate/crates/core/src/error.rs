use std::fmt;
use std::io;

/// Errors raised across the library.
///
/// `Contract` covers violated preconditions (bad shapes, out-of-range
/// timesteps, non-positive temperatures); the remaining variants carry
/// runtime failures.
#[derive(Debug)]
pub enum Error {
    Contract(String),
    NonFinite { stage: String },
    TooLarge { size: u128, cap: u128 },
    Format(String),
    Io { path: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite { stage: stage.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite { stage } => write!(f, "non-finite values at {stage}"),
            Error::TooLarge { size, cap } => {
                write!(f, "enumeration of {size} states exceeds cap {cap}")
            }
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let failed = !$cond;
        if failed {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
