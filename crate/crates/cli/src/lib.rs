//! Persistence and command implementations behind the `ntex` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod mesh;

pub use error::{CliError, CliResult};
