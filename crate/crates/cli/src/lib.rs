//! Driver for training the prior, single reconstructions, per-image
//! uncertainty reports and the full digit x budget x seed sweep.

pub mod commands;
pub mod config;
pub mod output;
pub mod sweep;

use std::path::PathBuf;

pub use commands::{cmd_reconstruct, cmd_train, cmd_uq, Method};
pub use config::ExperimentConfig;
pub use sweep::{cmd_experiment, SweepOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ctuq_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} sweep cells failed; see {}", manifest.display())]
    PartialSweep { failed: usize, total: usize, manifest: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::PartialSweep { .. } => EXIT_PARTIAL,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> String {
        self.to_string()
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}
