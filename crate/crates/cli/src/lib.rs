//! Command-line entry points and the annotation HTTP service.

pub mod cli;
pub mod commands;
pub mod error;
pub mod job;
pub mod server;

pub use error::{exit, CliError, CliResult};
