//! Command implementations behind the `tempoflow` binary.

pub mod commands;
pub mod error;

pub use commands::{AblationMode, Flags};
pub use error::{CliError, CliResult};
pub use tempoflow_core::config::RunConfig;
