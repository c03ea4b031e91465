use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("series too short: need at least {needed} steps, got {got}")]
    InsufficientLength { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("series has zero variance, no period can be detected")]
    NoPeriod,

    #[error("degenerate bandwidth: all samples are identical")]
    DegenerateBandwidth,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
