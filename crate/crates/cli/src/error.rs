use std::fmt;

use nisp_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const IO: u8 = 2;
    pub const FORMAT: u8 = 3;
    pub const CONFIG: u8 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(exit::CONFIG, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// I/O → 2, malformed files or datasets → 3, bad configuration → 4.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => exit::IO,
        Error::Format(_) | Error::Data(_) => exit::FORMAT,
        Error::Config(_) => exit::CONFIG,
        _ => exit::OTHER,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: exit_code(&e), message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
