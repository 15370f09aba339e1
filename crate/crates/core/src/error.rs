use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape did not line up. The message names the offending axis.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("asset error ({asset}): {reason}")]
    Asset { asset: String, reason: String },

    #[error("no auxiliary text cached for class `{class}` and no LLM client configured")]
    MissingAuxiliary { class: String },

    #[error("auxiliary text generation failed for `{class}`: {reason}")]
    Generation { class: String, reason: String },

    #[error("augmentation `{transform}` failed: {reason}")]
    Augmentation { transform: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("sample `{sample}`: {reason}")]
    Sample { sample: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn asset(asset: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Asset {
            asset: asset.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Asset { .. } | Error::Io { .. } | Error::Image { .. } => 3,
            _ => 4,
        }
    }
}
