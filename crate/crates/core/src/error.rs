use thiserror::Error;

/// Errors raised by the modelling, fitting and evaluation routines.
#[derive(Debug, Error)]
pub enum MmvError {
    /// An argument lies outside the domain of the operation (bad dimension,
    /// unknown state index, non-finite input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A model failed construction-time validation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// The requested cone variant is not supported by the operation.
    #[error("unsupported cone variant: {0}")]
    Unsupported(String),

    #[error(
        "support enumeration needs {needed} patterns which exceeds the cap of {cap}; \
         use greedy support search instead"
    )]
    EnumerationCap { needed: u128, cap: usize },

    /// The iterative cell solver hit its iteration cap without certifying
    /// optimality. Carries the best iterate found.
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e}){context}")]
    Solver {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
        context: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl MmvError {
    /// Attaches a location description to solver errors, e.g. `(t=3, state=1, minus)`.
    pub fn in_cell(self, location: impl std::fmt::Display) -> Self {
        match self {
            MmvError::Solver {
                iterations,
                residual,
                best,
                context,
            } => MmvError::Solver {
                iterations,
                residual,
                best,
                context: format!("{context} at {location}"),
            },
            MmvError::Numerical(msg) => MmvError::Numerical(format!("{msg} at {location}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmvError>;
