use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlueError {
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("invalid sizes: {0}")]
    Size(String),
    #[error("grid mismatch: {0}")]
    Shape(String),
    #[error("singular point: {0}")]
    Singular(String),
    #[error("missing or invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contraction failure: measured factor {factor:.4e} exceeds {threshold:.4e}")]
    Threshold { factor: f64, threshold: f64 },
    #[error("gluing parameter too large: measured {measured:.4e} exceeds {limit:.4e}")]
    TooLarge { measured: f64, limit: f64 },
    #[error("iteration did not converge after {iterations} steps (last defect {defect:.4e})")]
    Iteration { iterations: usize, defect: f64 },
    #[error("rank deficiency: {0}")]
    Rank(String),
    #[error("resolution too small: {0}")]
    Resolution(String),
    #[error("inconsistent data: {0}")]
    Consistency(String),
    #[error("parity error: {0}")]
    Parity(String),
}

impl GlueError {
    /// Stable machine-readable code, used by the command-line runner.
    pub fn code(&self) -> &'static str {
        match self {
            GlueError::Domain(_) => "domain",
            GlueError::Size(_) => "size",
            GlueError::Shape(_) => "shape",
            GlueError::Singular(_) => "singular",
            GlueError::Input(_) => "input",
            GlueError::Config(_) => "config",
            GlueError::Threshold { .. } => "threshold",
            GlueError::TooLarge { .. } => "t_too_large",
            GlueError::Iteration { .. } => "iteration",
            GlueError::Rank(_) => "rank",
            GlueError::Resolution(_) => "resolution",
            GlueError::Consistency(_) => "consistency",
            GlueError::Parity(_) => "parity",
        }
    }
}

pub type Result<T> = std::result::Result<T, GlueError>;
