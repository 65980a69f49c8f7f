use thiserror::Error;

/// Errors surfaced by the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum MfgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("CFL violation: dt*max|b|/h = {ratio:.3} > 1")]
    CflViolation { ratio: f64 },

    #[error("solver diverged: {0}")]
    Divergence(String),

    #[error("fixed point did not converge after {iterations} sweeps (last gap {gap:.3e})")]
    NonConvergence {
        iterations: usize,
        gap: f64,
        gap_history: Vec<f64>,
    },

    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("memory budget exceeded: {0}")]
    Budget(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
