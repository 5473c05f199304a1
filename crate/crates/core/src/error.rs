use thiserror::Error;

use crate::action::ActionValue;
use crate::evolvers::SolveDiagnostics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel gradient is singular at t = {0}")]
    SingularKernel(f64),

    #[error("unknown {kind} `{name}`")]
    NotFound { kind: &'static str, name: String },

    #[error("blow-up at t = {t}: |u|_inf = {norm:e}")]
    BlowUp { t: f64, norm: f64 },

    #[error("step guard violated at t = {t}: dt = {dt} exceeds limit {limit}")]
    StepGuard { t: f64, dt: f64, limit: f64 },

    #[error("Picard iteration did not converge after {} sweeps (last increment {:e})", .0.iterations, .0.last_increment)]
    Convergence(SolveDiagnostics),

    #[error("optimizer did not converge: residual {:e} after {} iterations", .0.residual, .0.iterations)]
    NonConvergence(Box<ActionValue>),

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("insufficient data: estimate at eps = {eps} has p_hat = 0")]
    InsufficientData { eps: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
