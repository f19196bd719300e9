use thiserror::Error;

/// Errors raised by model construction, synthesis and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible transmission: bucket level {beta} plus refill {refill} cannot cover cost {cost}")]
    InfeasibleTransmission { beta: i64, refill: i64, cost: i64 },

    #[error("lifted pair is not controllable (numerical rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },

    #[error("Riccati iteration did not converge within {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("Hessian is singular after regularization")]
    SingularHessian,

    #[error("optimal control problem infeasible at step {step}")]
    OcpInfeasible { step: usize },

    #[error("closed loop has not converged: final |(x,u)| = {residual:e}, tolerance {tol:e}")]
    NotConverged { residual: f64, tol: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
