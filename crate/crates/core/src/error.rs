use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("masked softmax row {row} has no permitted entry")]
    DegenerateRow { row: usize },

    #[error("backward already ran on this tape; build a fresh tape for the next step")]
    DoubleBackward,

    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("invalid attention layout: {0}")]
    Layout(String),

    #[error("index ({i}, {j}) out of range for a layout of {len} tokens")]
    IndexOutOfRange { i: usize, j: usize, len: usize },

    #[error("stale publish: epoch {offered} is not newer than current epoch {current}")]
    StalePublish { offered: u64, current: u64 },

    #[error("cold cache: no snapshot has been published yet")]
    ColdCache,

    #[error("snapshot epoch {epoch} is ahead of action step {step}")]
    FutureSnapshot { epoch: u64, step: u64 },

    #[error("inconsistent snapshot: {0}")]
    InconsistentSnapshot(String),

    #[error("incompatible cache: {0}")]
    IncompatibleCache(String),

    #[error("token {token} outside the action vocabulary at position {position}")]
    VocabularyRange { position: usize, token: usize },

    #[error("infeasible maneuver segment {index}: {reason}")]
    InfeasibleManeuver { index: usize, reason: String },

    #[error("trace too short: need {needed} frames, have {available}")]
    TraceTooShort { needed: usize, available: usize },

    #[error("diffusion step {step} outside schedule of length {len}")]
    ScheduleRange { step: usize, len: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("format: {0}")]
    Format(String),

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
