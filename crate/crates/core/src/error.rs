use thiserror::Error;

/// Errors produced across the recognition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error on line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot encode {0:?}: not in alphabet")]
    Encoding(String),

    #[error("segmentation failed for label {label:?} with {strokes} strokes: {msg}")]
    Segmentation {
        label: String,
        strokes: usize,
        msg: String,
    },

    #[error("infeasible CTC target: {0}")]
    Infeasible(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
