//! Library half of the command-line tool: configuration and the pipeline
//! steps behind each subcommand.

pub mod config;
pub mod pipeline;

pub use config::Config;
