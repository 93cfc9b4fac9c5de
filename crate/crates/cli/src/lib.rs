//! Command-line front end for the `gapcoref` toolkit.

pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
