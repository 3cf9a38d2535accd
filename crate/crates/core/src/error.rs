use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("generator row {row} sums to {sum} (expected 1)")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("generator entry ({row}, {col}) is {value}; entries must be finite and non-negative")]
    InvalidEntry { row: usize, col: usize, value: f64 },

    #[error("generator is reducible: state {to} is not reachable from state {from}")]
    ReducibleGenerator { from: usize, to: usize },

    #[error("reward function f is constant")]
    ConstantReward,

    #[error("assumption {name} violated: {detail}")]
    AssumptionViolated { name: &'static str, detail: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter interval [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },

    #[error("theta {theta} outside [{lo}, {hi}]")]
    ThetaOutOfRange { theta: f64, lo: f64, hi: f64 },

    #[error("matrix power {d} outside 1..={max}")]
    PowerOutOfRange { d: usize, max: usize },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("max delay R = {r} must be at least the arm count K = {k}")]
    MaxDelayTooSmall { r: usize, k: usize },

    #[error("need at least {min} {what}, got {got}")]
    TooFew {
        what: &'static str,
        min: usize,
        got: usize,
    },

    #[error("arm {arm} is not admissible in state {state}")]
    InvalidAction { state: usize, arm: usize },

    #[error("expected {expected} arm models, got {got}")]
    ArmCountMismatch { expected: usize, got: usize },

    #[error("policy does not induce a chain with a unique stationary distribution")]
    NonErgodicPolicy,

    #[error("best arm is not unique (means tie within 1e-12)")]
    NonUniqueBest,

    #[error("occupancy is infeasible: {0}")]
    InfeasibleOccupancy(String),

    #[error("relative value iteration did not converge after {0} sweeps")]
    RviNoConvergence(usize),

    #[error("policy caches used before they were built")]
    StaleCache,

    #[error("flow audit failed at n = {n}, state {state}: counted {counted}, expected {expected}")]
    AuditFailure {
        n: u64,
        state: usize,
        counted: u64,
        expected: u64,
    },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of an iterative numerical method, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::RviNoConvergence(_) | Error::NonErgodicPolicy
        )
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
