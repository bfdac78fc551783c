//! Experiment harness: configuration, commands, and reporting around the
//! adaptation engine.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_adapt, cmd_pretrain, cmd_report, cmd_sweep, ResultBundle, SweepAxis};
pub use config::ExperimentConfig;

use std::fmt;

/// Harness-level failures, split by exit-code class: validation problems
/// exit 2, runtime failures exit 1.
#[derive(Clone, Debug)]
pub enum HarnessError {
    Validation(String),
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Validation(msg) => write!(f, "validation error: {msg}"),
            HarnessError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_runtime(context: &str, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{context}: {e}"))
}
