//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension for {what}: got {got}, need at least {min}")]
    InvalidDimension {
        what: &'static str,
        got: usize,
        min: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operators live on different spaces")]
    SpaceMismatch,

    #[error("tensor product needs at least one factor")]
    EmptyFactors,

    #[error("factor {index} is not a {expected}")]
    WrongFactorKind {
        index: usize,
        expected: &'static str,
    },

    #[error("no factor labelled `{0}`")]
    UnknownFactor(String),

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not unitary: residual {residual:.3e} exceeds {tol:.3e}")]
    NotUnitary { residual: f64, tol: f64 },

    #[error("degenerate detuning: delta must be nonzero")]
    DegenerateDetuning,

    #[error("operator does not commute with the block label: residual {residual:.3e}")]
    DoesNotCommute { residual: f64 },

    #[error("block label operator is not diagonal in the computational basis: residual {residual:.3e}")]
    LabelNotDiagonal { residual: f64 },

    #[error("structure polynomial has not been extracted yet")]
    ExtractionRequired,

    #[error("polynomial fit failed on block n={n_value}: residual {residual:.3e} exceeds {tol:.3e}")]
    ExtractionFailed {
        n_value: f64,
        residual: f64,
        tol: f64,
    },

    #[error("frame generator is not diagonal: off-diagonal norm {residual:.3e}")]
    FrameNotDiagonal { residual: f64 },

    #[error("invalid density state: {0}")]
    InvalidState(String),

    #[error("step size too large: dt = {dt:.3e}, suggested dt <= {suggested:.3e}")]
    StabilityGuard { dt: f64, suggested: f64 },

    #[error("integration invariant `{what}` violated at t = {time:.6}: residual {residual:.3e}")]
    InvariantViolation {
        what: &'static str,
        time: f64,
        residual: f64,
    },

    #[error("superoperator guard: dim^2 = {0} exceeds 10^4")]
    SuperopGuard(usize),

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
