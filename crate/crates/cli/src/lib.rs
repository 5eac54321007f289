//! Command-line front end and HTTP service for the leakwatch engine.
//!
//! [`commands`] implements the batch subcommands over flow-log files;
//! [`server`] exposes a running [`leakwatch_core::engine::Engine`] over a
//! JSON API.

pub mod commands;
mod error;
pub mod server;

pub use error::CliError;
