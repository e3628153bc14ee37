use std::fmt;

use polypart_core::analysis::AnalysisError;
use polypart_core::datamodel::DataError;
use polypart_core::toy::ToyError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const EMPTY: i32 = 3;
    pub const ALIGNMENT: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: exit::INPUT,
            message: message.into(),
        }
    }

    pub fn empty(what: &str) -> Self {
        Self {
            code: exit::EMPTY,
            message: format!("{what}: no frames"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::UnknownFrame { .. } => exit::ALIGNMENT,
            _ => exit::INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        let code = match e {
            ToyError::Divergence { .. } => exit::DIVERGENCE,
            _ => exit::INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
