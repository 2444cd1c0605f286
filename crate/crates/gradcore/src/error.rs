use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GradError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        GradError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;
