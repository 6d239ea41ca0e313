use std::path::PathBuf;

/// Errors surfaced by every module of the toolkit.
///
/// Variants mirror the failure classes callers need to tell apart; the C ABI
/// maps each one to a stable integer code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("forge error: {0}")]
    Forge(String),
    #[error("region error: {0}")]
    Region(String),
    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
    #[error("network error: {0}")]
    Network(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("missing entry: {0}")]
    MissingEntry(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
