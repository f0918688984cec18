//! Command implementations behind the `nbsynth` binary. Each command is also
//! callable in memory, which is how the integration tests drive them.

pub mod classic;
pub mod config;
pub mod error;
pub mod fit;
pub mod output;
pub mod simulate;
pub mod validate;

pub use error::{CliError, CliResult, EXIT_MODEL, EXIT_USAGE};
