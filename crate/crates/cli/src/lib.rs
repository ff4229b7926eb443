//! File formats, run configuration and commands behind the `gmfuse` binary.

pub mod alloc;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod selftest;

pub use config::RunConfig;
pub use error::{CliError, Result};
