//! Command-line front end: subcommands, config files, run manifests and
//! slice export.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod slices;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
