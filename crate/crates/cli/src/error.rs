use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] repkit_core::Error),

    #[error("alphas do not match the weights (theta residual {0:e})")]
    StaleAlphas(f64),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 non-convergence.
    pub fn exit_code(&self) -> u8 {
        use repkit_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidConfig(_)) => 1,
            CliError::Core(E::LineSearchStall { .. } | E::CgNoConvergence { .. } | E::Divergence { .. }) => 3,
            CliError::Core(_) | CliError::StaleAlphas(_) | CliError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
