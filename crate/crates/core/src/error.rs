use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum DpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data too short: {0}")]
    DataTooShort(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("QP infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = DpcError> = std::result::Result<T, E>;

pub(crate) fn dim_check(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(DpcError::Dimension(format!("{what}: expected {expected}, got {got}")))
    }
}
