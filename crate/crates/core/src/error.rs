use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty attention context")]
    EmptyAttention,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty polyline")]
    EmptyPolyline,
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("gradients already computed for this tape")]
    TapeConsumed,
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("focal agent is not observed at the current timestep")]
    FocalUnobserved,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("ratio {name} = {value} outside [0, 1]")]
    InvalidRatio { name: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown {kind} index {index}")]
    UnknownCategory { kind: &'static str, index: usize },
    #[error("missing parameters: {0:?}")]
    MissingParams(Vec<String>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
}
