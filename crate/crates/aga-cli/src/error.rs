//! CLI error type with the exit-code contract:
//! 0 success, 1 verification failure, 2 usage/input error, 3 numeric failure.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable inputs, malformed config or file formats.
    Usage(String),
    /// Non-finite values encountered during computation.
    Numeric(String),
    /// One or more verification checks failed.
    VerifyFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            CliError::VerifyFailed(n) => write!(f, "{n} verification check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}

impl From<aga_core::Error> for CliError {
    fn from(e: aga_core::Error) -> Self {
        match e {
            aga_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}
