use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Config(String),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(fracimp::Error),
}

impl From<fracimp::Error> for CliError {
    fn from(e: fracimp::Error) -> Self {
        // Unreadable inputs get the dedicated input class and exit code.
        match e {
            fracimp::Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Input { path, source }
            }
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Input { .. } => "E_INPUT",
            CliError::Config(_) => "E_CONFIG",
            CliError::Output { .. } => "E_OUTPUT",
            CliError::Core(e) => e.code(),
        }
    }

    /// 2 for problems with what the user supplied, 1 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } | CliError::Config(_) => 2,
            CliError::Core(fracimp::Error::Validation(_)) => 2,
            _ => 1,
        }
    }
}
