use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] obbstack::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 usage or configuration, 3 data or contract, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use obbstack::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::CalibrationFailure(_) | E::Numerical(_)) => 4,
            CliError::Core(_) | CliError::Io { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
