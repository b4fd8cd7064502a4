//! Failures of a CLI run and their exit codes.

/// A failed run.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The configuration or the potential description is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A numerical routine failed.
    #[error("numerical failure: {0}")]
    Numerical(#[from] dsii_core::Error),
    /// Writing results failed.
    #[error("output failure: {0}")]
    Output(String),
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for failures during the run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Output(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}
