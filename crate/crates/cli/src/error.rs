use std::path::PathBuf;

use thiserror::Error;

/// Exit status for usage, input and parse problems.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for model failures and, with `--strict`, non-convergence.
pub const EXIT_MODEL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] nbsynth::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("chains did not converge: {0}")]
    NotConverged(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use nbsynth::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Invalid(_) => EXIT_USAGE,
            CliError::NotConverged(_) => EXIT_MODEL,
            CliError::Core(e) => match e {
                E::Parse { .. } | E::Config(_) | E::Domain(_) | E::ImpossibleData(_) | E::Routing(_) => EXIT_USAGE,
                E::CostGuard { .. } | E::DegenerateFit(_) | E::Initialization(_) | E::Diagnostic(_) => EXIT_MODEL,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
