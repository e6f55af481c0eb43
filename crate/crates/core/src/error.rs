use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("infeasible domain: {0}")]
    InfeasibleDomain(String),

    #[error("intersection projection did not settle after {iterations} iterations (last move {last_move:e})")]
    ProjectionStalled { iterations: usize, last_move: f64 },

    #[error("prox solve did not converge after {iterations} iterations (residual {residual:e})")]
    ProxStalled { iterations: usize, residual: f64 },

    #[error("privacy budget hypothesis violated: epsilon {epsilon} exceeds 2 ln(2/delta) = {bound}")]
    BudgetHypothesis { epsilon: f64, bound: f64 },

    #[error("parallel composition inapplicable: silo {silo} phases {first} and {second} share index {index}")]
    CompositionViolation {
        silo: usize,
        first: usize,
        second: usize,
        index: usize,
    },

    #[error("no silos available in round {round}")]
    EmptyRound { round: u64 },

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("missing capability: {0}")]
    MissingCapability(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Rejects anything that is not a strictly positive finite number.
pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {value}")))
    }
}
