use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the domain box")]
    PointOutsideDomain { point: Vec<f64> },

    #[error("unknown structure `{0}`")]
    UnknownStructure(String),

    #[error("frame field {field} has no analytic jacobian and finite differences are disabled")]
    JacobianUnavailable { field: usize },

    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("operation requires a C11 structure, `{structure}` is tagged C0")]
    RegularityMismatch { structure: String },

    #[error("frame rank {rank} < {expected} at the requested point")]
    RankDeficient { rank: usize, expected: usize },

    #[error("seed covector is degenerate at x' = {at:?} (first-component norm {norm:e})")]
    SeedDegenerate { at: Vec<f64>, norm: f64 },

    #[error("calibration construction failed: {0}")]
    ConstructionFailed(String),

    #[error("point {point:?} is outside the calibrated set")]
    OutsideCalibratedSet { point: Vec<f64> },

    #[error("vector is not horizontal (residual {residual:e})")]
    NotHorizontal { residual: f64 },

    #[error("neighbourhood search exhausted after {rounds} rounds (eps1 = {eps1:e}, eps2 = {eps2:e})")]
    ShrinkExhausted { rounds: usize, eps1: f64, eps2: f64 },

    #[error("every frame field vanishes at the base point")]
    ZeroFrame,

    #[error("path is not admissible at segment {segment} (defect {defect:e})")]
    NotAdmissible { segment: usize, defect: f64 },

    #[error("target lies beyond the oracle radius cap {cap}")]
    CapExceeded { cap: f64 },

    #[error("point lies on or outside the boundary of the box")]
    DegenerateBox,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn outside(point: &[f64]) -> Self {
        Error::PointOutsideDomain { point: point.to_vec() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
