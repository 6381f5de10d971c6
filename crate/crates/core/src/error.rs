use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlError>;

#[derive(Debug, Error)]
pub enum GlError {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} is not positive definite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{what} is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{what} is singular")]
    Singular { what: &'static str },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("sparsity pattern is empty; the condition is undefined")]
    EmptyPattern,

    #[error("group {group} has zero norm ({context})")]
    ZeroNorm { group: usize, context: &'static str },

    #[error("range condition violated for group {group}: mean component {component:e}")]
    RangeCondition { group: usize, component: f64 },

    #[error("rejection sampling exceeded {attempts} attempts")]
    AttemptCapExceeded { attempts: usize },

    #[error("at grid point {index}: {source}")]
    AtGridPoint {
        index: usize,
        #[source]
        source: Box<GlError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
