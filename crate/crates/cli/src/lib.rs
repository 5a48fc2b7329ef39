//! Library side of the `sacd-lab` binary: configuration, subcommands and the
//! gradient-check suite.

pub mod commands;
pub mod config;
pub mod gradsuite;

pub use commands::{exit_code, run, Cli};
