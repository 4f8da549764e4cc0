//! Error types shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by tensor construction, model configuration, datasets,
/// checkpoints and training.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a configuration) disagree on dimensions.
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// Structural problem: bad dataset layout, unsupported checkpoint,
    /// degenerate input and so on.
    Structural(String),
    /// Invalid configuration value or key.
    Config(String),
    /// A value that must be finite is NaN or infinite.
    NonFinite(String),
    /// Training aborted because a loss went non-finite. Carries the
    /// component dump for diagnosis.
    TrainAbort { step: u64, detail: String },
    /// Filesystem error with the offending path.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Image decode/encode error with the offending path.
    Image { path: PathBuf, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                actual,
            } => {
                write!(
                    f,
                    "shape mismatch in {context}: expected {expected:?}, got {actual:?}"
                )
            }
            Error::Structural(msg) => write!(f, "{msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::TrainAbort { step, detail } => {
                write!(f, "training aborted at step {step}: {detail}")
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Image { path, detail } => {
                write!(f, "image error on {}: {detail}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Image {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
