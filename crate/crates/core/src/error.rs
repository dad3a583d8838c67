pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// `Shape` covers extent mismatches, `Contract` covers violated
/// preconditions that are not shape-related, `Format` covers malformed
/// on-disk artifacts, `Training` covers optimizer divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
