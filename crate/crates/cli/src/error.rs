use std::path::PathBuf;

use gsc::GscError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration values.
    #[error("{0}")]
    Usage(String),

    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),

    #[error(transparent)]
    Core(#[from] GscError),
}

impl CliError {
    /// 2 for unusable input, 3 for divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingFile(_) => 2,
            CliError::Core(GscError::Config(_)) => 2,
            CliError::Core(GscError::Diverged { .. }) => 3,
            CliError::GradcheckFailed(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(GscError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(GscError::Json(e))
    }
}
