use std::process::ExitCode;

use mixalign::Error;

/// Errors mapped onto the documented exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, bad arguments or a broken contract: exit 2.
    #[error("{0}")]
    Config(String),
    /// The output already exists and `--force` was not given: exit 3.
    #[error("{0} already exists (pass --force to overwrite)")]
    WouldOverwrite(String),
    /// The method cannot run on these inputs: exit 4.
    #[error("{0}")]
    Precondition(String),
    /// Anything else (I/O, numerics, a failed verification): exit 1.
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::WouldOverwrite(_) => 3,
            CliError::Precondition(_) => 4,
        })
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) => CliError::Config(e.to_string()),
            Error::Precondition(_) => CliError::Precondition(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("invalid JSON: {e}"))
    }
}
