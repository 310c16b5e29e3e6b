//! Command implementations behind the `polyglot` binary.

pub mod commands;
pub mod config;
