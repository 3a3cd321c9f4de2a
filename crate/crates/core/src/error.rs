use alloc::string::String;

/// Errors raised across the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("row {row} is entirely masked")]
    AllMaskedRow { row: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("unknown modality {0}")]
    UnknownModality(u32),
    #[error("token width mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("modality {0} appears more than once")]
    DuplicateModality(u32),
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("Gram matrix is degenerate (norm {0:e})")]
    DegenerateGram(f64),
    #[error("adapter rank {rank} exceeds width {dim}")]
    RankExceedsDim { rank: usize, dim: usize },
    #[error("decay must be nonnegative, got {0}")]
    InvalidDecay(f64),
    #[error("self and cross activation are both zero")]
    BothZero,
    #[error("series must have at least two strictly positive values")]
    NonPositiveSeries,
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
