use std::path::Path;

use mongeflow::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    /// Unreadable or inconsistent input data or artifacts.
    #[error("input: {0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    /// The semi-discrete fit stopped above tolerance.
    #[error("fit did not converge: residual {residual:.3e} > tol {tol:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, tol: f64, iterations: usize },

    #[error("experiment {id}: {source}")]
    Experiment { id: String, source: CoreError },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 usage, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Input(_) => 3,
            CliError::NotConverged { .. } => 4,
            CliError::Core(e) | CliError::Experiment { source: e, .. } => core_code(e),
        }
    }
}

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Usage(_) | CoreError::Capacity { .. } => 2,
        CoreError::Io(_) | CoreError::Json(_) | CoreError::Parse { .. } => 3,
        CoreError::Domain(_)
        | CoreError::Singularity(_)
        | CoreError::Divergence { .. }
        | CoreError::Degeneracy(_)
        | CoreError::Coverage(_) => 4,
    }
}
