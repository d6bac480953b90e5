use std::io;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate identity center: class {0} has a zero-norm weight row")]
    DegenerateCenter(usize),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
