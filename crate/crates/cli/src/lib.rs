//! The convbeam pipeline as four commands sharing one artifact directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
