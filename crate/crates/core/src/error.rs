use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{table} id {id} out of range (size {size})")]
    IdOutOfRange {
        table: &'static str,
        id: usize,
        size: usize,
    },

    #[error("schema mismatch in field {field}: {detail}")]
    Schema { field: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate label distribution (p = {p})")]
    DegenerateLabels { p: f64 },

    #[error("undefined transfer ratio: upstream delta is zero")]
    UndefinedTransferRatio,

    #[error("iso-FLOPs tolerance exceeded: {a} vs {b} FLOPs")]
    FlopsMismatch { a: u64, b: u64 },

    #[error("timeline is not sorted at position {index}")]
    UnsortedTimeline { index: usize },

    #[error("target positive rate {target} unreachable with bias in [-10, 10]")]
    UnreachableRate { target: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
