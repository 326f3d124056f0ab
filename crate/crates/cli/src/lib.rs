//! Library side of the `elastic-hte` command-line tool: configuration,
//! CSV ingestion and the four commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
