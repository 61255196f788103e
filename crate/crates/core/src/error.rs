use thiserror::Error;

/// Errors raised by estimation, inference and I/O routines.
#[derive(Debug, Error)]
pub enum OslsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),

    #[error("mixture term B(x; theta) is nonpositive ({value:e}) at test row {row}")]
    NonpositiveMixture { row: usize, value: f64 },

    #[error("lambda system has no interior root: {0}")]
    NoInteriorRoot(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("singular matrix ({what}); condition number estimate {condition:e}")]
    Singular { what: String, condition: f64 },

    #[error("all {starts} EM starts failed: {details}")]
    AllStartsFailed { starts: usize, details: String },

    #[error("infeasible constraint: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl OslsError {
    /// Whether the error stems from bad input (as opposed to a numerical failure).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            OslsError::InvalidInput(_)
                | OslsError::DimensionMismatch { .. }
                | OslsError::Infeasible(_)
                | OslsError::Io(_)
                | OslsError::Csv(_)
                | OslsError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, OslsError>;
