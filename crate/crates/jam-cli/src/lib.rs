//! Operator surface for the translation recommender: CLI commands over
//! the core library plus a JSON-over-HTTP top-k endpoint.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/contract error,
//! 3 external-provider error.

pub mod cli;
pub mod commands;
pub mod config;
pub mod serve;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Provider(m) => write!(f, "provider: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<jam_core::JamError> for CliError {
    fn from(e: jam_core::JamError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Provider(_) => 3,
        }
    }
}
