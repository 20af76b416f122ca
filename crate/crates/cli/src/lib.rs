//! File formats and the `aifopt` command line on top of `aifopt-core`.

pub mod commands;
pub mod error;
pub mod format;
pub mod tables;

pub use crate::commands::{run, Cli};
pub use crate::error::{CliError, FormatError};
