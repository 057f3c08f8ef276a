use thiserror::Error;

/// Errors raised anywhere in the object-prompting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("mask selects no patches")]
    EmptyMask,

    #[error("embedding has zero or non-finite norm")]
    DegenerateEmbedding,

    #[error("no candidates left in the retrieval index")]
    EmptyIndex,

    #[error("retrieved record {0} has no label")]
    MissingLabel(u64),

    #[error("prompt slot {0} is not bound to an object")]
    UnboundSlot(usize),

    #[error("could not place objects: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
