//! `run`: executes an experiment grid and persists its artifacts.
//!
//! Layout under the output root:
//!
//! ```text
//! manifest.json
//! metrics.csv
//! runs/<run id>/record.json
//! runs/<run id>/final.ckpt
//! runs/<run id>/snapshots/step<k>_task<id>.fisher
//! runs/<run id>/assignments/step<k>_task<id>.json
//! ```
//!
//! `record.json` is written last; a run directory whose record carries the
//! current configuration hash is complete and is skipped on rerun.

use super::checkpoint::{save_params, snapshot_to_container};
use super::config::{Cell, ExperimentConfig};
use super::{file_digest, write_atomic, CommandError};
use crate::classifier::dump_assignment;
use crate::error::Error;
use crate::prompts::Lexicon;
use crate::synth::make_sequence;
use crate::trainer::{run_sequence_with, sequence_hash, RunRecord, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// What `record.json` holds: the grid cell and its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRun {
    pub id: String,
    pub cell: Cell,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub id: String,
    pub config_hash: String,
    pub wall_time_s: f64,
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the whole experiment configuration.
    pub config_hash: String,
    pub code_version: String,
    /// Files shared by all runs, such as `metrics.csv`.
    pub files: Vec<FileDigest>,
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn runs_dir(root: &Path) -> PathBuf {
    root.join("runs")
}

fn ensure_writable(root: &Path) -> Result<(), CommandError> {
    let probe = root.join(".write-probe");
    std::fs::create_dir_all(root)
        .and_then(|_| std::fs::write(&probe, b""))
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| CommandError::Config(format!("output directory {} is not writable: {e}", root.display())))
}

pub fn read_stored(path: &Path) -> Option<StoredRun> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Executes every grid cell not already completed under the same hash.
pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> Result<RunSummary, CommandError> {
    let root = cfg.resolved_output();
    ensure_writable(&root)?;
    std::fs::create_dir_all(runs_dir(&root))?;
    let cells = cfg.cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<bool, CommandError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let outcome = run_cell(cfg, &root, cell);
                results.lock().expect("result slots")[i] = Some(outcome);
            });
        }
    });
    let mut summary = RunSummary { output: root.clone(), ..Default::default() };
    for (cell, outcome) in cells.iter().zip(results.into_inner().expect("result slots")) {
        match outcome.expect("every cell visited")? {
            true => summary.executed.push(cell.id()),
            false => summary.skipped.push(cell.id()),
        }
    }
    let stored: Vec<StoredRun> = cells
        .iter()
        .filter_map(|c| read_stored(&runs_dir(&root).join(c.id()).join("record.json")))
        .collect();
    write_atomic(&root.join("metrics.csv"), metrics_csv(&stored).as_bytes())?;
    let manifest = build_manifest(cfg, &root, &stored)?;
    write_atomic(&root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(summary)
}

fn cell_trainer(cfg: &ExperimentConfig, cell: &Cell) -> TrainerConfig {
    TrainerConfig { method: cell.method, seed: cell.seed, ..cfg.trainer.clone() }
}

/// Returns `Ok(false)` when the cell was already complete.
fn run_cell(cfg: &ExperimentConfig, root: &Path, cell: &Cell) -> Result<bool, CommandError> {
    let id = cell.id();
    let dir = runs_dir(root).join(&id);
    let suite = cfg.suite(cell.seed);
    let order = suite.order(&cell.order).ok_or_else(|| CommandError::Config(format!("unknown order `{}`", cell.order)))?;
    let tasks = make_sequence(&suite, order, cell.tiers, cell.seed)?;
    let trainer = cell_trainer(cfg, cell);
    let hash = sequence_hash(&tasks, &cfg.model, &trainer)?;
    if let Some(done) = read_stored(&dir.join("record.json")) {
        if done.record.config_hash == hash {
            log::info!("skip {id}: complete with config hash {}", &hash[..12]);
            return Ok(false);
        }
    }
    log::info!("run {id}");
    std::fs::create_dir_all(dir.join("snapshots"))?;
    std::fs::create_dir_all(dir.join("assignments"))?;
    let lexicon = Lexicon::default();
    let mut final_params = None;
    let record = run_sequence_with(&tasks, &cfg.model, &trainer, &lexicon, |step| {
        let task_id = tasks[step.position].spec.task_id;
        let stem = format!("step{}_task{}", step.position, task_id);
        if let Some(snap) = step.snapshots.last().filter(|_| step.snapshots.len() == step.position + 1) {
            snapshot_to_container(snap, step.params)?.write(&dir.join("snapshots").join(format!("{stem}.fisher")))?;
        }
        if cell.method == crate::trainer::Method::PaEwc {
            dump_assignment(step.params.groups(), &dir.join("assignments").join(format!("{stem}.json")))?;
        }
        log::info!("{id}: step {} (task {task_id}) dice {:?}", step.position, step.dice_row);
        if step.position + 1 == tasks.len() {
            final_params = Some(step.params.clone());
        }
        Ok(())
    });
    let record = match record {
        Ok(r) => r,
        Err(Error::Numeric(msg)) => return Err(CommandError::Diverged { run: id, source: Error::Numeric(msg) }),
        Err(e) => return Err(e.into()),
    };
    let final_params = final_params.expect("observer sees the last step");
    save_params(&final_params, &dir.join("final.ckpt"))?;
    let stored = StoredRun { id: id.clone(), cell: cell.clone(), record };
    write_atomic(&dir.join("record.json"), serde_json::to_string_pretty(&stored)?.as_bytes())?;
    Ok(true)
}

/// One row per (checkpoint, task); forgetting is the drop from the task's
/// best score since its own training step and is empty before that step.
pub fn metrics_csv(runs: &[StoredRun]) -> String {
    let mut out = String::from("method,order,tiers,seed,checkpoint,task_position,task_id,dice,forgetting\n");
    for run in runs {
        let m = &run.record.dice_matrix;
        for (k, row) in m.iter().enumerate() {
            for (j, &dice) in row.iter().enumerate() {
                let forgetting = if j <= k {
                    let peak = (j..=k).map(|r| m[r][j]).fold(f64::NEG_INFINITY, f64::max);
                    format!("{:.6}", peak - dice)
                } else {
                    String::new()
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{k},{j},{},{dice:.6},{forgetting}",
                    run.cell.method,
                    run.cell.order,
                    run.cell.tiers.name(),
                    run.cell.seed,
                    run.record.order[j]
                );
            }
        }
    }
    out
}

fn build_manifest(cfg: &ExperimentConfig, root: &Path, stored: &[StoredRun]) -> Result<RunManifest, CommandError> {
    let mut runs = Vec::with_capacity(stored.len());
    for s in stored {
        let dir = runs_dir(root).join(&s.id);
        let mut paths = vec![dir.join("record.json"), dir.join("final.ckpt")];
        for sub in ["snapshots", "assignments"] {
            let mut entries: Vec<PathBuf> = match std::fs::read_dir(dir.join(sub)) {
                Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
                Err(_) => Vec::new(),
            };
            entries.sort();
            paths.extend(entries);
        }
        let files = paths
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        runs.push(ManifestRun { id: s.id.clone(), config_hash: s.record.config_hash.clone(), wall_time_s: s.record.wall_time_s, files });
    }
    Ok(RunManifest {
        config_hash: crate::trainer::config_hash(cfg)?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        files: vec![FileDigest { path: "metrics.csv".into(), sha256: file_digest(&root.join("metrics.csv"))? }],
        runs,
    })
}

/// Checks that every file listed in a manifest exists and matches its digest.
pub fn verify_manifest(root: &Path) -> Result<Vec<String>, CommandError> {
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json"))?)?;
    let mut problems = Vec::new();
    for f in manifest.files.iter().chain(manifest.runs.iter().flat_map(|r| &r.files)) {
        match file_digest(&root.join(&f.path)) {
            Ok(d) if d == f.sha256 => {}
            Ok(_) => problems.push(format!("{}: digest mismatch", f.path)),
            Err(e) => problems.push(format!("{}: {e}", f.path)),
        }
    }
    Ok(problems)
}
