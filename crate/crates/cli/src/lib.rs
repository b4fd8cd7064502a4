//! Command-line front end: configuration, subcommands and output files.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
