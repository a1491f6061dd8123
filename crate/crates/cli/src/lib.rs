//! Experiment harness: parse a spec, run seeded trials, persist per-run and
//! aggregate artifacts, and emit histogram data for score-distribution plots.

pub mod experiment;
pub mod spec;

pub use experiment::{emit_histogram, run_experiment, sweep_ood_count, RunArtifacts};
pub use spec::{DatasetSpec, ExperimentSpec, Profile};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] openset_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("bad spec file {path}: {detail}")]
    SpecParse { path: String, detail: String },
}

impl CliError {
    /// Process exit code: 1 for configuration problems, 2 for numerical
    /// failures mid-run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(openset_core::Error::NonFiniteLoss { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
