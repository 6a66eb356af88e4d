//! Command-line front end: JSON configs, the experiment commands and SVG
//! charts of their reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use error::{CliError, CliResult};
