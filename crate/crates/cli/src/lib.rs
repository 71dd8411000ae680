//! Library side of the `jers` command: run configuration, the five commands
//! and their on-disk outputs.
pub mod commands;
pub mod config;
mod error;
pub mod images;

pub use config::{RunConfig, SweepAxis, SweepConfig};
pub use error::{CliError, Result, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC, EXIT_OTHER};

/// Validates `JERS_THREADS`, the cap on convolution worker threads. Results
/// do not depend on the value; anything but a positive integer is a
/// configuration error.
pub fn thread_cap(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "JERS_THREADS must be a positive integer, got {s:?}"
            ))),
        },
    }
}
