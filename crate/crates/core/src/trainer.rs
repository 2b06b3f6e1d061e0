//! Sequential task training with the three protection methods.

use crate::autodiff::Tape;
use crate::classifier::{classify, probe_responses};
use crate::error::{bail, Error, Result};
use crate::fisher::{
    activation_stats, adaptive_fisher, adaptive_weight, base_fisher, group_gradient_norms, group_means, stability_factor,
    task_similarity, ActivationStats, FisherSnapshot,
};
use crate::metrics::{evaluate_dice, forgetting_rate, EvalResult};
use crate::model::{build_model, forward_on_tape, Group, ModelConfig, ParamStore};
use crate::objectives::{composite_loss, LossBreakdown, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompts::{complexity, Lexicon, Vocab};
use crate::seed::derive_seed;
use crate::synth::{Batch, Sample, TaskDataset};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sequential,
    GeneralEwc,
    PaEwc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sequential, Method::GeneralEwc, Method::PaEwc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sequential => "sequential",
            Method::GeneralEwc => "general_ewc",
            Method::PaEwc => "pa_ewc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub method: Method,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without validation-Dice improvement before stopping.
    pub early_stop_patience: usize,
    pub loss: LossWeights,
    /// Training items whose gradients enter the base Fisher.
    pub fisher_samples: usize,
    /// Minibatches sampled for the gradient-stability variance.
    pub stability_batches: usize,
    /// Probe items used by the parameter classifier.
    pub probe_samples: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::PaEwc,
            epochs_per_task: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            seed: 43,
            early_stop_patience: 5,
            loss: LossWeights::default(),
            fisher_samples: 64,
            stability_batches: 8,
            probe_samples: 16,
        }
    }
}

impl TrainerConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            bail!(Config, "epochs_per_task and batch_size must be at least 1");
        }
        if self.fisher_samples == 0 || self.probe_samples == 0 {
            bail!(Config, "fisher_samples and probe_samples must be at least 1");
        }
        if self.stability_batches < 2 {
            bail!(Config, "stability_batches must be at least 2");
        }
        self.loss.validate()?;
        self.optimizer().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's minibatches.
    pub loss: LossBreakdown,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task_id: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.seg += b.seg / n;
        m.dice += b.dice / n;
        m.ewc += b.ewc / n;
        m.total += b.total / n;
    }
    m
}

/// One optimisation step's loss and gradients on a minibatch.
fn minibatch_step(
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &Batch,
    snapshots: &[FisherSnapshot],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let trace = forward_on_tape(&params.config, &mut tape, &vars, &batch.images, &batch.prompts)?;
    let loss = composite_loss(&mut tape, &vars, trace.logits, &batch.masks, snapshots, weights)?;
    let breakdown = loss.breakdown(&tape)?;
    let grads = tape.backward(loss.total)?;
    opt.step(params, &grads)?;
    Ok(breakdown)
}

/// Trains on one task with the composite loss and keeps the parameters of
/// the epoch with the best validation Dice.
///
/// `position` is the task's index in the sequence; it seeds the minibatch
/// shuffles so every method sees the same data order.
pub fn train_task(
    params: &mut ParamStore,
    data: &TaskDataset,
    vocab: &Vocab,
    snapshots: &[FisherSnapshot],
    cfg: &TrainerConfig,
    position: usize,
) -> Result<TaskLog> {
    if data.train.is_empty() || data.val.is_empty() {
        bail!(Input, "task {} needs nonempty train and validation splits", data.spec.task_id);
    }
    let weights = match cfg.method {
        Method::Sequential => LossWeights { w_ewc: 0.0, ..cfg.loss },
        _ => cfg.loss,
    };
    let snapshots = if cfg.method == Method::Sequential { &[][..] } else { snapshots };
    let mut opt = AdamW::new(cfg.optimizer())?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut log = TaskLog { task_id: data.spec.task_id, epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    for epoch in 0..cfg.epochs_per_task {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[position as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::new(&samples, &data.spec, vocab, None)?;
            let b = minibatch_step(params, &mut opt, &batch, snapshots, &weights).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("task {} epoch {epoch}: {msg}", data.spec.task_id)),
                other => other,
            })?;
            losses.push(b);
        }
        if !params.is_finite() {
            bail!(Numeric, "task {} epoch {epoch}: parameters diverged", data.spec.task_id);
        }
        let val_dice = evaluate_dice(params, &data.spec, &data.val, vocab)?;
        log.epochs.push(EpochLog { epoch, loss: mean_breakdown(&losses), val_dice });
        if val_dice > best.0 {
            best = (val_dice, epoch, params.clone());
        } else if epoch - best.1 >= cfg.early_stop_patience {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = best.1;
    *params = best.2;
    Ok(log)
}

/// Assigns every block a group from its gradient response to the task's
/// probe prompts, overwriting earlier tags.
pub fn refresh_groups(params: &mut ParamStore, data: &TaskDataset, vocab: &Vocab, cfg: &TrainerConfig) -> Result<IndexMap<String, Group>> {
    let matrix = probe_responses(params, &data.spec, data.probe(), vocab, cfg.probe_samples)?;
    let assignment = classify(&matrix)?;
    params.set_groups(&assignment)?;
    Ok(assignment)
}

fn anchor_of(params: &ParamStore) -> IndexMap<String, Vec<f64>> {
    params.iter().map(|(k, t)| (k.to_string(), t.data().to_vec())).collect()
}

/// Freezes what the penalty needs to protect the task just learned.
///
/// `prev` holds the previous task's activation statistics (similarity is 1
/// for the first task) and `complexity_max` the largest complexity seen on
/// earlier tasks (0 if none).
pub fn snapshot_task(
    params: &ParamStore,
    data: &TaskDataset,
    vocab: &Vocab,
    lexicon: &Lexicon,
    cfg: &TrainerConfig,
    prev: Option<&ActivationStats>,
    complexity_max: f64,
) -> Result<FisherSnapshot> {
    let spec = &data.spec;
    let base = base_fisher(params, spec, &data.train, vocab, cfg.fisher_samples)?;
    let mut snap = FisherSnapshot::empty(spec.task_id);
    snap.anchor = anchor_of(params);
    snap.complexity = complexity(data.prompts(), lexicon)?.value;
    match cfg.method {
        Method::Sequential => bail!(State, "sequential training keeps no snapshots"),
        Method::GeneralEwc => {
            snap.per_block_fisher = base.raw;
            snap.groups = params.names().map(|n| (n.to_string(), Group::Unassigned)).collect();
            snap.group_weight = BTreeMap::from([(Group::Unassigned, 1.0)]);
        }
        Method::PaEwc => {
            let norms = group_gradient_norms(params, spec, &data.train, vocab, cfg.stability_batches, cfg.batch_size)?;
            snap.stability = stability_factor(&norms)?;
            snap.activation_stats = activation_stats(params, spec, data.probe(), vocab)?;
            snap.similarity = match prev {
                Some(p) => task_similarity(p, &snap.activation_stats)?,
                None => 1.0,
            };
            snap.groups = params.groups().clone();
            snap.per_block_fisher = adaptive_fisher(&base.scaled(), &snap.groups, &snap.stability, snap.similarity)?;
            let c_max = complexity_max.max(snap.complexity);
            snap.group_weight = group_means(&snap.per_block_fisher, &snap.groups)
                .into_iter()
                .map(|(g, f)| Ok((g, adaptive_weight(f, snap.complexity, c_max)?)))
                .collect::<Result<_>>()?;
        }
    }
    Ok(snap)
}

/// Dice of every task after every training step, plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Task ids in training order.
    pub order: Vec<usize>,
    /// Row `k`: test Dice of every task (training order) after step `k`.
    /// Entries above the diagonal are measured before that task's training.
    pub dice_matrix: Vec<Vec<f64>>,
    pub peak: Vec<f64>,
    pub final_dice: Vec<f64>,
    pub eval: EvalResult,
    pub config_hash: String,
    pub wall_time_s: f64,
    pub task_logs: Vec<TaskLog>,
    /// Group assignment used for each task (empty unless classified).
    pub assignments: Vec<IndexMap<String, Group>>,
}

/// State after a task, handed to [`run_sequence_with`] observers.
pub struct StepView<'a> {
    pub position: usize,
    pub params: &'a ParamStore,
    pub snapshots: &'a [FisherSnapshot],
    pub dice_row: &'a [f64],
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Identifies a run by its trainer and model settings and the task specs
/// and prompt tiers it trains on.
pub fn sequence_hash(tasks: &[TaskDataset], model: &ModelConfig, cfg: &TrainerConfig) -> Result<String> {
    let specs: Vec<_> = tasks.iter().map(|t| (&t.spec, t.tier)).collect();
    config_hash(&(cfg, model, &specs))
}

pub fn run_sequence(
    tasks: &[TaskDataset],
    model: &ModelConfig,
    cfg: &TrainerConfig,
    lexicon: &Lexicon,
) -> Result<RunRecord> {
    run_sequence_with(tasks, model, cfg, lexicon, |_| Ok(()))
}

/// Trains on `tasks` in order, evaluating every task after each step and
/// calling `observe` once per step.
pub fn run_sequence_with<F>(
    tasks: &[TaskDataset],
    model: &ModelConfig,
    cfg: &TrainerConfig,
    lexicon: &Lexicon,
    mut observe: F,
) -> Result<RunRecord>
where
    F: FnMut(&StepView<'_>) -> Result<()>,
{
    if tasks.len() < 2 {
        bail!(Input, "a sequence needs at least 2 tasks, got {}", tasks.len());
    }
    cfg.validate()?;
    let start = Instant::now();
    let vocab = Vocab::builtin(lexicon);
    let mut params: ParamStore = build_model(model, cfg.seed)?;
    let order: Vec<usize> = tasks.iter().map(|t| t.spec.task_id).collect();
    let hash = sequence_hash(tasks, model, cfg)?;

    let mut snapshots: Vec<FisherSnapshot> = Vec::new();
    let mut matrix = Vec::with_capacity(tasks.len());
    let mut logs = Vec::with_capacity(tasks.len());
    let mut assignments = Vec::new();
    let mut c_max = 0.0f64;
    for (pos, data) in tasks.iter().enumerate() {
        if cfg.method == Method::PaEwc {
            assignments.push(refresh_groups(&mut params, data, &vocab, cfg)?);
        }
        logs.push(train_task(&mut params, data, &vocab, &snapshots, cfg, pos)?);
        let row = tasks
            .iter()
            .map(|t| evaluate_dice(&params, &t.spec, &t.test, &vocab))
            .collect::<Result<Vec<_>>>()?;
        if cfg.method != Method::Sequential {
            let prev = snapshots.last().map(|s| &s.activation_stats);
            let snap = snapshot_task(&params, data, &vocab, lexicon, cfg, prev, c_max)?;
            c_max = c_max.max(snap.complexity);
            snapshots.push(snap);
        }
        matrix.push(row);
        observe(&StepView { position: pos, params: &params, snapshots: &snapshots, dice_row: &matrix[pos] })?;
    }
    let eval = forgetting_rate(&matrix)?;
    let t = tasks.len();
    let peak = (0..t).map(|j| (j..t).map(|k| matrix[k][j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    Ok(RunRecord {
        method: cfg.method,
        seed: cfg.seed,
        order,
        final_dice: matrix[t - 1].clone(),
        peak,
        dice_matrix: matrix,
        eval,
        config_hash: hash,
        wall_time_s: start.elapsed().as_secs_f64(),
        task_logs: logs,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ewc".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        assert!(TrainerConfig { epochs_per_task: 0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { stability_batches: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&TrainerConfig::default()).unwrap();
        assert_eq!(a, config_hash(&TrainerConfig::default()).unwrap());
        assert_eq!(a.len(), 64);
        assert_ne!(a, config_hash(&TrainerConfig { seed: 44, ..Default::default() }).unwrap());
    }
}
