use std::path::PathBuf;

use drmiss::data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: DataError },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("positivity violation: {0}")]
    Positivity(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input { .. } | CliError::Parse { .. } | CliError::Io { .. } => 2,
            CliError::Estimation(_) => 3,
            CliError::Positivity(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
