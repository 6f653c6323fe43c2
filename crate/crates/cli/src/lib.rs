//! Pipeline commands behind the `isocomp` binary: parameter accounting,
//! teacher pretraining, importance scoring, distillation, evaluation and the
//! bottleneck-placement ablation.

mod args;
mod commands;
mod config;
mod report;

pub use args::{Cli, Command, Flags};
pub use commands::{
    cmd_ablation, cmd_count, cmd_distill, cmd_eval, cmd_pretrain, cmd_score, load_corpus, AblationReport, CountReport,
    EvalOutcome, ScoreOutcome, SeedRun, StudentRuns, TrainOutcome,
};
pub use config::{require_file, RunConfig};
pub use report::{count_table, importance_table, thousands, UNIFORM_MEDIUM_NOTE};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("{0}")]
    Config(String),
    /// Data, I/O or training failure; exit code 2.
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn runtime(e: impl Into<anyhow::Error>, context: &Path) -> Self {
        CliError::Runtime(e.into().context(context.display().to_string()))
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}
