use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum AtdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("budget {budget} exceeds the {candidates} candidate query locations")]
    BudgetExceedsCandidates { budget: usize, candidates: usize },
    #[error("budget exhausted after {0} queries")]
    BudgetExhausted(usize),
    #[error("query index {index} out of range (candidates: {candidates})")]
    QueryOutOfRange { index: usize, candidates: usize },
    #[error("location {0} was already queried")]
    DuplicateQuery(usize),
    #[error("all candidate locations have been visited")]
    CandidatesExhausted,
    #[error("diffusion step {step} out of range (T = {steps})")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("operation requires a trainable backend, got {0}")]
    BackendMismatch(&'static str),
    #[error("ball placement failed after {retries} retries (count={count}, radius={radius})")]
    PlacementFailure {
        count: usize,
        radius: usize,
        retries: usize,
    },
    #[error("non-finite score at step {step} (candidate {candidate})")]
    NonFiniteScore { step: usize, candidate: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AtdError>;
