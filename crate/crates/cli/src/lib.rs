//! Library surface of the command-line tool, exposed so integration tests
//! can drive the pipeline in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_fit, cmd_pipeline, cmd_synth, CliError, Invocation};
pub use config::RunConfig;
