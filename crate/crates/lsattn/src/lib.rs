//! File formats, run directories and the command implementations behind the
//! `lsattn` binary.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod heatmap;
pub mod manifest;
pub mod pnm;
pub mod run;
pub mod settings;

pub use error::{CliError, CliResult};
