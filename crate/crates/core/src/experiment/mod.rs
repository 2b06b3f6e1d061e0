//! Experiment grid runner, persistence and reporting behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;
pub mod selftest;

use std::path::{Path, PathBuf};

pub use config::{Cell, ConfigError, ExperimentConfig};

/// Failure of a CLI command, carrying its process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run {run} diverged: {source}")]
    Diverged { run: String, source: crate::Error },
    #[error("no complete runs under {}", .0.display())]
    NoRuns(PathBuf),
    #[error("self-test failed: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
    #[error(transparent)]
    Engine(#[from] crate::Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Diverged { .. } => 3,
            CommandError::NoRuns(_) => 4,
            CommandError::ChecksFailed(_) | CommandError::Engine(_) => 1,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Config(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CommandError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CommandError::Engine(e.into())
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Engine(e.into())
    }
}

impl From<serde_json::Error> for CommandError {
    fn from(e: serde_json::Error) -> Self {
        CommandError::Engine(e.into())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes via a sibling temporary file so readers never see partial output.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

/// Renders the synthetic suite to disk (comprehensive prompts).
pub fn cmd_gen_tasks(out: &Path, seed: u64) -> Result<Vec<PathBuf>, CommandError> {
    let suite = crate::synth::default_suite(seed);
    let mut dirs = Vec::new();
    for spec in &suite.specs {
        let data = crate::synth::make_task(spec, crate::prompts::Tier::Comprehensive, seed)?;
        crate::synth::dump_dataset(&data, out)?;
        dirs.push(out.join(format!("task{}_{}", spec.task_id, spec.family.as_str())));
    }
    Ok(dirs)
}
