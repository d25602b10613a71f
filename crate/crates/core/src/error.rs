use thiserror::Error;

/// Errors raised by the tomography pipeline.
#[derive(Debug, Error)]
pub enum TomographyError {
    #[error("matrix is not Hermitian: entry ({row}, {col}) deviates from its conjugate partner by {deviation:e}")]
    NotHermitian { row: usize, col: usize, deviation: f64 },

    #[error("degenerate transition frequencies: transitions {first:?} and {second:?} differ by {gap:e}")]
    DegenerateSpectrum {
        first: (usize, usize),
        second: (usize, usize),
        gap: f64,
    },

    #[error("degenerate basis: Gram eigenvalue ratio {ratio:e} is below {threshold:e}")]
    DegenerateBasis { ratio: f64, threshold: f64 },

    #[error("probability {value} lies outside [0, 1] beyond round-off tolerance")]
    ProbabilityOutOfRange { value: f64 },

    #[error("reference Hamiltonian cannot balance |1>: minimum imbalance {imbalance:.4}")]
    Unbalanceable { imbalance: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trace file: {0}")]
    TraceFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TomographyError>;

pub(crate) fn invalid(msg: impl Into<String>) -> TomographyError {
    TomographyError::InvalidInput(msg.into())
}
