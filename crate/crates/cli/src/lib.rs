//! Command-line front end: CSV ingestion, study configuration files,
//! the `simulate`, `estimate` and `diagnose` subcommands, and report
//! serialization.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod tabular;

pub use error::{CliError, Result};
