use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid depth value {0}")]
    InvalidDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("pixel ({u}, {v}) is outside the image")]
    OutOfBounds { u: f64, v: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("triangulated point is behind a camera")]
    Cheirality,
    #[error("no sparse depth samples survived")]
    EmptySparseDepth,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("prediction and ground truth share no valid pixels")]
    NoCommonPixels,
    #[error("requested {requested} correspondences but only {available} are available")]
    InsufficientCorrespondences { requested: usize, available: usize },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} format error at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            msg: msg.into(),
        }
    }
}
