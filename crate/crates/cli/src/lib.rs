//! File formats, configuration and subcommands of the `tofrecon` command-line tool.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod trm;

pub use error::{CliError, CliResult};
