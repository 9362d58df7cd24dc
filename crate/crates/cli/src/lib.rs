//! Configuration files, experiment commands and metric export for the
//! `fedsim` binary.

pub mod commands;
pub mod config_file;
pub mod error;
pub mod metrics;
pub mod svg;

pub use commands::{cmd_compare, cmd_run, CompareArgs, RunArgs};
pub use error::{CliError, CliResult};
