//! Command implementations and the live session service behind the `ilsa`
//! binary.

pub mod commands;
pub mod config;
pub mod server;
pub mod wire;

use ilsa_core::IlsaError;

/// Failure of one CLI invocation, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(IlsaError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(IlsaError::Training { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<IlsaError> for CliError {
    fn from(e: IlsaError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(IlsaError::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
