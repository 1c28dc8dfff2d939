use std::path::PathBuf;

/// Crate-wide error type.
///
/// Tensor-level shape mismatches panic (they are programming errors with
/// statically known shapes); everything that can fail at runtime — file I/O,
/// parsing, config validation, numeric degeneracy — flows through this enum.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("file error: {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable category tag, used by the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::File { .. } => "file",
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
