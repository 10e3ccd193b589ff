//! Library side of the `mvfa` command-line tool.
//!
//! Commands live in [`commands`]; the self-contained numerical checks behind
//! `mvfa verify` live in [`verify`] so tests can call them directly.

pub mod commands;
pub mod config;
pub mod verify;

use std::fmt;

pub use config::{DataSource, RunConfig, TrainOverrides};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: exit::USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: exit::RUNTIME,
            message: message.into(),
        }
    }

    pub fn verify_failed(message: impl Into<String>) -> Self {
        CliError {
            code: exit::VERIFY_FAILED,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mvfa_core::Error> for CliError {
    fn from(e: mvfa_core::Error) -> Self {
        match e {
            mvfa_core::Error::Config(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
