use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("bad magic in tensor file (expected \"VPT1\")")]
    BadMagic,

    #[error("unsupported tensor dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after tensor payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("tensor dimensions overflow or are invalid: {0}")]
    DimOverflow(String),

    #[error("calibration schema violation: {0}")]
    Schema(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("power iteration did not converge after {iters} iterations (angular residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("feature covariance is zero")]
    ZeroCovariance,

    #[error("foreground became empty at PCA iteration {0}")]
    EmptyForeground(usize),

    #[error("both candidate foreground sides are empty")]
    EmptyCandidates,

    #[error("optimization diverged at iteration {0} (non-finite loss)")]
    Divergence(usize),

    #[error("MODA undefined: no ground truth but {fp} detections")]
    UndefinedModa { fp: usize },

    #[error("pedestrian placement failed after {0} attempts")]
    Placement(usize),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::MissingInput(_) => 3,
            Error::Divergence(_) => 5,
            Error::BadMagic
            | Error::UnsupportedDtype(_)
            | Error::TruncatedPayload { .. }
            | Error::TrailingBytes { .. }
            | Error::NonFinite(_)
            | Error::DimOverflow(_)
            | Error::Schema(_)
            | Error::Config(_) => 4,
            _ => 6,
        }
    }
}
