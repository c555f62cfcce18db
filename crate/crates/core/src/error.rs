use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12, cannot normalize")]
    ZeroVector,

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("row {row} is not unit norm (norm {norm})")]
    NonUnitRows { row: usize, norm: f64 },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("positional encoding dimension {0} is odd")]
    OddDimension(usize),

    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("forward cache does not match these parameters: {0}")]
    StaleCache(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("split is empty")]
    EmptySplit,

    #[error("rank list is empty")]
    EmptyRanks,

    #[error("query {query} has no relevant gallery items")]
    MissingRelevance { query: usize },

    #[error("report is missing recall at K={0}")]
    MissingK(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { expected: u32, found: u32 },

    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
