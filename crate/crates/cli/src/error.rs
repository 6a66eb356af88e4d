use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] occludox::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 I/O or file format,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use occludox::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Format { .. } | E::Parse { .. } => 3,
                E::Numeric(_) => 4,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
