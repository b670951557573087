use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("parameterization mismatch: {0}")]
    ParameterizationMismatch(String),
    #[error("schedule out of range: eta({t}) = {eta} must be < 1 for the subgradient family")]
    ScheduleOutOfRange { t: u64, eta: f64 },
    #[error("unknown neuron or mechanism name `{0}`")]
    UnknownMechanism(String),
    #[error("arity mismatch: mechanism expects {expected} operand(s), got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown operator kind `{0}`")]
    UnknownOp(String),
    #[error("truncated blob: tensor `{name}` needs bytes {end} but blob payload has {len}")]
    TruncatedBlob { name: String, end: usize, len: usize },
    #[error("graph is not a DAG: cycle through node `{0}`")]
    Cycle(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported pattern: {0}")]
    UnsupportedPattern(String),
    #[error("conversion error at node `{node}`: {reason}")]
    Conversion { node: String, reason: String },
    #[error("malformed graph: {0}")]
    Graph(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
