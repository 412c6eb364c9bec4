use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("unbound leaf `{0}`")]
    Unbound(String),
    #[error("binding `{name}` has shape {got:?}, graph expects {expected:?}")]
    BindingShape {
        name: String,
        expected: [usize; 2],
        got: alloc::vec::Vec<usize>,
    },
    #[error("backward seed must be a scalar, node {node} has shape {rows}x{cols}")]
    NonScalarSeed { node: usize, rows: usize, cols: usize },
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate embedding: zero vector cannot be normalized")]
    DegenerateEmbedding,
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("modality `{0}` is not present")]
    MissingModality(&'static str),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("bootstrap gave up after {0} redraws without a defined metric")]
    RetryCapExceeded(usize),
    #[error("class {class} has {count} records, need at least {needed}")]
    ClassTooSmall {
        class: i64,
        count: usize,
        needed: usize,
    },
    #[error("records do not match the {task} label schema: {detail}")]
    SchemaMismatch { task: &'static str, detail: String },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
