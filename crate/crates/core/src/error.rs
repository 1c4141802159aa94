use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("data length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid transfer does not cover the image grid: {0}")]
    Coverage(String),

    #[error("grids do not span the same extent: {0}")]
    ExtentMismatch(String),

    #[error("cannot downsample: {0}")]
    Downsample(String),

    #[error("direction is not a descent direction (slope {0})")]
    NotDescent(f64),

    #[error("conjugate gradient breakdown: {0}")]
    CgBreakdown(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing header key `{0}`")]
    MissingKey(String),

    #[error("unsupported dimension count {0} (only 3 is supported)")]
    UnsupportedDimension(usize),

    #[error("unknown element type `{0}`")]
    UnknownElementType(String),

    #[error("payload size mismatch: header implies {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("malformed input at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("sidecar grid does not match: {0}")]
    SidecarMismatch(String),

    #[error("landmark count mismatch: {fixed} fixed vs {moving} moving")]
    LandmarkCount { fixed: usize, moving: usize },

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
