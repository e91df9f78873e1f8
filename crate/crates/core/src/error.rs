use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("{0} is not aligned with the grid")]
    NotGridAligned(String),

    #[error("support of the cap is disconnected: {0}")]
    Disconnected(String),

    #[error("CFL condition violated: dt = {dt:e} exceeds limit {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("density at the membrane reached the positivity floor in cell {0}")]
    Vacuum(usize),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("table range exceeded: density {value} outside [0, {max}]")]
    TableRange { value: f64, max: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
