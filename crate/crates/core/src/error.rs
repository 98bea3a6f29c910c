use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("image stem `{stem}` has no matching mask in {mask_dir}")]
    MissingMask { stem: String, mask_dir: PathBuf },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown transform kind `{0}`")]
    UnknownTransform(String),

    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),

    #[error("pretrained encoder weights not available at {path}: {reason}; train from scratch instead (omit `pretrained_source` or pass --from-scratch)")]
    PretrainedUnavailable { path: PathBuf, reason: String },

    #[error("checkpoint format version mismatch: file has v{found}, this build reads v{expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr:.3e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Errors caused by bad input or configuration rather than a failure during a run.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::NoSamples(_)
                | Error::MissingMask { .. }
                | Error::InvalidArgument(_)
                | Error::UnknownTransform(_)
                | Error::PretrainedUnavailable { .. }
                | Error::CheckpointVersion { .. }
                | Error::Config(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
