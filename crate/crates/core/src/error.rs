use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("degenerate velocity: density {density:e} below floor {floor:e} at t={t}, x={x:?}")]
    DegenerateVelocity {
        density: f64,
        floor: f64,
        t: f64,
        x: Vec<f64>,
    },
    #[error("pointwise prox root-find did not converge at time index {k}, cell {cell}")]
    ProxFailure { k: usize, cell: usize },
    #[error("conjugate gradient stalled after {iters} iterations (relative residual {residual:e})")]
    CgNotConverged { iters: usize, residual: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
