use thiserror::Error;

/// Errors raised by mesh construction, assembly and the gradient flow.
#[derive(Debug, Error)]
pub enum LdgError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular or indefinite matrix: {0}")]
    Singular(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e}); try a smaller tau or a looser tolerance")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("Schur complement is not positive definite (curvature {curvature:.3e} at iteration {iteration})")]
    IndefiniteSchur { iteration: usize, curvature: f64 },

    #[error("energy increased at step {step}: {before:.12e} -> {after:.12e}")]
    EnergyIncrease { step: usize, before: f64, after: f64 },

    #[error("non-finite value encountered at step {0}")]
    NotFinite(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("state file error: {0}")]
    StateFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LdgError>;
