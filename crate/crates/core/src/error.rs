use thiserror::Error;

pub type Result<T> = std::result::Result<T, FusionError>;

/// Errors produced while building, fitting, or simulating fusion models.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("variance function vanished or is non-finite for study {study}, source {source_index}, participant {participant}, position {position}")]
    SingularVariance {
        study: usize,
        source_index: usize,
        participant: usize,
        position: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no convergence after {iterations} iterations (gradient sup-norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("linear system is singular even after ridge damping: {0}")]
    Singular(String),

    #[error("Godambe matrix is rank deficient for group {group}")]
    RankDeficient { group: usize },

    #[error("ADMM diverged at iteration {iteration} (primal {primal:.3e}, dual {dual:.3e})")]
    Divergence {
        iteration: usize,
        primal: f64,
        dual: f64,
    },

    #[error("solution path failed: {0}")]
    Path(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("simulation study failed: {0}")]
    Study(String),

    #[error("artifact verification failed: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl FusionError {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FusionError::SingularVariance { .. }
            | FusionError::NonConvergence { .. }
            | FusionError::Singular(_)
            | FusionError::RankDeficient { .. }
            | FusionError::Divergence { .. }
            | FusionError::Path(_)
            | FusionError::Study(_) => 2,
            _ => 1,
        }
    }
}
