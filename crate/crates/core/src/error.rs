use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is numerically singular")]
    Singular,
    #[error("sparse backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid decomposition: {0}")]
    Partition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scaling is not a partition of unity (deviation {0:.3e})")]
    PartitionOfUnity(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("Krylov solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("Newton diverged at step {step}: residual {residual:.3e} after {iterations} iterations")]
    NewtonDiverged {
        step: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
