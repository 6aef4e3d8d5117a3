use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {prim}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        prim: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{prim} expects {expected} input(s), got {got}")]
    Arity {
        prim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid tensor: shape {shape:?} holds {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: String, value: f64 },

    #[error("training aborted: non-finite loss {value} at batch {batch}")]
    NonFiniteLoss { batch: usize, value: f64 },

    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    #[error("unknown parameter name: {0}")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("feature {feature}: categorical id {value} out of range (cardinality {cardinality})")]
    CategoricalOutOfRange {
        feature: String,
        value: u64,
        cardinality: u64,
    },

    #[error("feature {feature}: {reason}")]
    BadFeature { feature: String, reason: String },

    #[error("missing feature: {0}")]
    MissingFeature(String),

    #[error("empty scenario selection: no member scenario and global token disabled")]
    EmptyScenarioSelection,

    #[error("dataset line {line}: {reason}")]
    DatasetLine { line: usize, reason: String },

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("no query group has both a positive and a negative label")]
    NoValidGroups,

    #[error("invalid archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
