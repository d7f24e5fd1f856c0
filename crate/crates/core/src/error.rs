use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value {value} at pixel ({x}, {y}) channel {channel}")]
    NonFinite {
        x: usize,
        y: usize,
        channel: usize,
        value: f32,
    },

    #[error("direction below the horizon (z = {z})")]
    OutOfHemisphere { z: f64 },

    #[error("pixel ({u}, {v}) lies outside the fisheye disc")]
    OutsideDisc { u: f64, v: f64 },

    #[error("great arc between antipodal directions is ambiguous")]
    AntipodalArc,

    #[error("time {t} s outside the open interval (0, {delta_t}) s")]
    TimeOutOfRange { t: f64, delta_t: f64 },

    #[error("empty cloud mask")]
    EmptyMask,

    #[error("{0}")]
    Precondition(String),

    #[error("non-finite loss at step {step} (seed {seed})")]
    NumericFailure { step: usize, seed: u64 },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("malformed {kind} data: {message}")]
    Format { kind: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn in_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Innermost error, skipping per-frame wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
