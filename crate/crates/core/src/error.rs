use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid transition matrix: {0}")]
    InvalidTpm(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state diverged at step {step}")]
    Divergence { step: usize },

    #[error("no mode explains the transition observed at step {step}")]
    ModelMismatch { step: usize },

    #[error("mode chain is not irreducible")]
    Reducible,

    #[error("degenerate pattern collection: {reason} (condition number {condition:.3e})")]
    DegenerateCollection { reason: String, condition: f64 },

    #[error("no pattern in the collection can occur under the given chain")]
    UnreachablePatterns,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("locality constraints infeasible for disturbance column {column} (residual {residual:.3e})")]
    InfeasibleLocality { column: usize, residual: f64 },

    #[error("data not persistently exciting of order {order}: rank {rank} < {required}")]
    NotPersistentlyExciting {
        order: usize,
        rank: usize,
        required: usize,
    },

    #[error("mode {mode} has neither a model nor usable data")]
    UncontrollableMode { mode: usize },

    #[error("malformed system response text: {0}")]
    Parse(String),
}
