use thiserror::Error;

/// Errors raised anywhere in the alignment engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,

    #[error("tape node {node} references a later node {parent}")]
    Cycle { node: usize, parent: usize },

    #[error("vars belong to different tapes")]
    ForeignTape,

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
