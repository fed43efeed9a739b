use std::path::PathBuf;

use crate::geometry::FrameTag;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter lies outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("frame mismatch: expected points in {expected:?}, got {actual:?}")]
    FrameMismatch { expected: FrameTag, actual: FrameTag },

    /// Shapes or sizes that must agree do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed (NaN under a valid mask, corrupt file contents).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training error in parameter `{param}`: {message}")]
    Training { param: String, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
