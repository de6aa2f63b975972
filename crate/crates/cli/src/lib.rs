//! Library side of the `snapdoa` command: configuration schema, the
//! subcommand implementations and exit-code mapping.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
