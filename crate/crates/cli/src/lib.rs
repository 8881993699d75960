//! Command-line driver: configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod oracle_check;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
