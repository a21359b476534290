use std::path::{Path, PathBuf};

/// Library-wide error type. The CLI maps variants onto exit codes, so the
/// split is by *cause*: bad arguments vs. bad files vs. numeric blow-ups.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Malformed file contents: wrong magic, bad version, truncated payload.
    #[error("{0}")]
    Format(String),

    /// Mismatched dimensions or channel counts between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter outside its documented domain (σ ≤ 0, ε ≤ 0, …).
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Numeric failure at runtime: NaN loss, divergence.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn codec(path: impl AsRef<Path>, source: image::ImageError) -> Self {
        Error::Codec {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
