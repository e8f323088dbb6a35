//! File formats, dataset bundles, checkpoints and the subcommands of the
//! `adgcrnn` command-line tool. The numerics live in `adgcrnn-core`.

pub mod bundle;
pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod formats;

pub use error::{CliError, Result};
