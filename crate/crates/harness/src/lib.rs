//! Batch harness: random test systems, the estimation and reconstruction
//! pipeline over an `(N, Ne)` grid, and error reports.

pub mod config;
pub mod generate;
pub mod pipeline;
pub mod report;
pub mod stats;

use hamtomo::TomographyError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tomography(#[from] TomographyError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 1 for bad input, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => 2,
            HarnessError::Tomography(e) => match e {
                TomographyError::InvalidInput(_)
                | TomographyError::NotHermitian { .. }
                | TomographyError::TraceFormat(_)
                | TomographyError::ProbabilityOutOfRange { .. }
                | TomographyError::Io(_)
                | TomographyError::Json(_)
                | TomographyError::Csv(_) => 1,
                _ => 2,
            },
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
