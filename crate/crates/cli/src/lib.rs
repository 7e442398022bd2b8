//! Command implementations behind the `nanosyn` binary, exposed as a library
//! so integration tests can drive them directly.

pub mod commands;
pub mod config;
pub mod io_util;
pub mod manifest;

use std::fmt;

/// Command failures split by exit code: validation problems (bad config,
/// bad paths, schema mismatches) exit 1; runtime and numerical failures
/// exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "invalid input: {msg}"),
            CliError::Runtime(msg) => write!(f, "run failed: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}
