//! Library side of the `annostance` command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
