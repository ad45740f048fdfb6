//! Experiment runner for the `xbsim` crossbar simulator.
//!
//! [`config`] parses TOML experiment files, [`recipes`] executes them and
//! [`output`] writes the `metrics.csv` table into an atomically committed
//! output directory.

pub mod config;
pub mod output;
pub mod recipes;

use config::ConfigError;

/// Everything a CLI invocation can fail with, mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Sim(#[from] xbsim::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 when the crossbar runs out of devices,
    /// 4 for any other runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Sim(xbsim::Error::Config(_)) => 2,
            CliError::Sim(xbsim::Error::OutOfDevices(_)) => 3,
            CliError::Sim(_) | CliError::Io(_) => 4,
        }
    }
}
