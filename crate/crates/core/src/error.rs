use thiserror::Error;

use crate::trainer::LossBreakdown;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed header or record syntax.
    #[error("format error: {0}")]
    Format(String),

    /// A record contradicts the dataset header or another record.
    #[error("integrity error at id {id}: {reason}")]
    Integrity { id: u64, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate (zero-norm or non-finite) embedding for id {0}")]
    DegenerateEmbedding(u64),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Balanced OT needs both measures to carry the same unit mass.
    #[error("measures are not balanced: sum(a) = {sum_a}, sum(b) = {sum_b}")]
    Balance { sum_a: f64, sum_b: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("k must be at least 1")]
    InvalidK,

    #[error("id {0} not found in neighbor structures")]
    Mapping(u64),

    #[error("cost is degenerate: both the embedding-distance and label-consistency terms are disabled")]
    DegenerateCost,

    #[error("non-finite loss: {breakdown:?}")]
    Numerical { breakdown: Box<LossBreakdown> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
