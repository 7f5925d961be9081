use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid merge trace: {0}")]
    Trace(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown vocabulary symbol {0:?}")]
    Vocab(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("exhaustive enumeration refused for n = {0} (limit is 6)")]
    OracleGuard(usize),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },
    #[error("checkpoint header corrupt: {0}")]
    CheckpointHeader(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0:?}")]
    ExtraTensor(String),
    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint variant {found:?} does not match model variant {expected:?}")]
    VariantMismatch { expected: String, found: String },
    #[error("retained activations exceeded the budget of {0} scalars")]
    OverBudget(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
