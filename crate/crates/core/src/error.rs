use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "position out of bounds: window at ({y}, {x}) of size {height}x{width} exceeds {bound_height}x{bound_width}"
    )]
    OutOfBounds {
        y: f64,
        x: f64,
        height: usize,
        width: usize,
        bound_height: usize,
        bound_width: usize,
    },

    #[error("probe has zero power where an update denominator is required")]
    ZeroDenominator,

    #[error("empty statistics mask (no pixel changed by less than {threshold})")]
    EmptyMask { threshold: f64 },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error(transparent)]
    Npy(#[from] crate::npy::NpyError),

    #[error(transparent)]
    Editor(#[from] crate::editors::EditorError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_shape(what: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            what,
            expected: vec![expected.0, expected.1],
            actual: vec![actual.0, actual.1],
        });
    }
    Ok(())
}
