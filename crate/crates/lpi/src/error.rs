use thiserror::Error;

/// Errors surfaced by model construction, solvers and the bound engine.
#[derive(Debug, Error)]
pub enum LpiError {
    #[error("policy selects action {action} in state {state}, but the model has only {n_actions} actions")]
    InvalidPolicy {
        state: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("transition row ({action},{state}) sums to {sum}, not 1")]
    NonStochasticRow {
        state: usize,
        action: usize,
        sum: f64,
    },

    #[error("negative transition probability p[{action}][{state}][{next}] = {value}")]
    NegativeProbability {
        action: usize,
        state: usize,
        next: usize,
        value: f64,
    },

    #[error("discount factor gamma = {0} is outside (0,1)")]
    InvalidGamma(f64),

    #[error("non-finite entry at index {index}")]
    NonFiniteEntry { index: usize },

    #[error("matrix row {row} sums to {sum}, not 1 (tolerance {tol})")]
    RowSumViolation { row: usize, sum: f64, tol: f64 },

    #[error("matrix entry ({row},{col}) = {value} is negative beyond tolerance")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("linear solve failed: residual {residual} exceeds bound {bound}")]
    LinearSolveFailed { residual: f64, bound: f64 },

    #[error("lambda = {0} is outside [0,1]")]
    InvalidLambda(f64),

    #[error("fixed-point iteration did not converge within {cap} applications")]
    InnerIterationCap { cap: usize },

    #[error("probability vector: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trace index {index} out of range (trace has {len} records)")]
    TraceIndexOutOfRange { index: usize, len: usize },

    #[error("trace of length {len} is shorter than window {window}")]
    TraceTooShort { len: usize, window: usize },

    #[error("operation requires an exact trace, but the trace carries nonzero errors")]
    TraceNotExact,

    #[error("operation not defined for {algorithm} traces")]
    UnsupportedAlgorithm { algorithm: &'static str },
}

pub type Result<T, E = LpiError> = std::result::Result<T, E>;
