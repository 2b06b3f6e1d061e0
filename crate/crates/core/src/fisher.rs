//! Base Fisher information, gradient stability, activation-based task
//! similarity, their product, and complexity-scaled group weights.

use crate::autodiff::Tape;
use crate::error::{bail, Result};
use crate::model::{forward_on_tape, Group, ParamStore};
use crate::objectives::seg_ce;
use crate::prompts::Vocab;
use crate::synth::{Batch, Sample, TaskSpec};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Target of the base Fisher max-normalisation.
pub const FISHER_SCALE: f64 = 1000.0;

pub type BlockArrays = IndexMap<String, Vec<f64>>;

/// Mean and standard deviation of each probed layer's activations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationStats {
    pub per_layer: Vec<(f64, f64)>,
}

/// Everything the EWC penalty needs to remember about one finished task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSnapshot {
    pub task_id: usize,
    /// Importance per scalar, same layout as the parameter block.
    pub per_block_fisher: BlockArrays,
    /// Parameter values at the end of the task.
    pub anchor: BlockArrays,
    /// Group assignment active while the task was learned.
    pub groups: IndexMap<String, Group>,
    pub group_weight: BTreeMap<Group, f64>,
    pub stability: BTreeMap<Group, f64>,
    pub similarity: f64,
    pub complexity: f64,
    /// Statistics of the converged model on this task's probe batch.
    pub activation_stats: ActivationStats,
}

impl FisherSnapshot {
    pub fn empty(task_id: usize) -> Self {
        Self {
            task_id,
            per_block_fisher: IndexMap::new(),
            anchor: IndexMap::new(),
            groups: IndexMap::new(),
            group_weight: BTreeMap::new(),
            stability: BTreeMap::new(),
            similarity: 1.0,
            complexity: 0.0,
            activation_stats: ActivationStats::default(),
        }
    }

    /// Per-scalar penalty coefficients `w_m · F(θ)` of one block.
    pub fn coefficients(&self, block: &str) -> Result<Vec<f64>> {
        let Some(fisher) = self.per_block_fisher.get(block) else {
            bail!(State, "snapshot {} has no Fisher values for `{block}`", self.task_id);
        };
        let group = self.groups.get(block).copied().unwrap_or(Group::Unassigned);
        let Some(&w) = self.group_weight.get(&group) else {
            bail!(State, "snapshot {} has no weight for group {group} (block `{block}`)", self.task_id);
        };
        Ok(fisher.iter().map(|&f| w * f).collect())
    }
}

fn grads_for(params: &ParamStore, spec: &TaskSpec, vocab: &Vocab, samples: &[&Sample]) -> Result<BlockArrays> {
    let batch = Batch::new(samples, spec, vocab, None)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let trace = forward_on_tape(&params.config, &mut tape, &vars, &batch.images, &batch.prompts)?;
    let loss = seg_ce(&mut tape, trace.logits, &batch.masks)?;
    Ok(tape.backward(loss)?.into_map())
}

/// Elementwise mean of squared per-sample gradients.
pub fn mean_of_squares(per_sample: &[BlockArrays]) -> Result<BlockArrays> {
    let Some(first) = per_sample.first() else {
        bail!(Input, "no gradient samples");
    };
    let n = per_sample.len() as f64;
    let mut out: BlockArrays = first.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
    for g in per_sample {
        for (name, acc) in out.iter_mut() {
            let Some(src) = g.get(name) else {
                bail!(Input, "gradient sample lacks block `{name}`");
            };
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v * v / n;
            }
        }
    }
    Ok(out)
}

/// Empirical Fisher before and after max-normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFisher {
    pub raw: BlockArrays,
    /// Factor applied to `raw` so its maximum equals [`FISHER_SCALE`]; 1 when
    /// every entry is zero.
    pub scale: f64,
}

impl BaseFisher {
    pub fn from_raw(raw: BlockArrays) -> Self {
        let max = raw.values().flatten().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { FISHER_SCALE / max } else { 1.0 };
        Self { raw, scale }
    }

    pub fn scaled(&self) -> BlockArrays {
        self.raw.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x * self.scale).collect())).collect()
    }
}

/// Empirical Fisher from the ground-truth log-likelihood of the first
/// `n_samples` training items, one sample per gradient.
pub fn base_fisher(params: &ParamStore, spec: &TaskSpec, samples: &[Sample], vocab: &Vocab, n_samples: usize) -> Result<BaseFisher> {
    if n_samples == 0 || samples.is_empty() {
        bail!(Input, "base Fisher needs at least one sample");
    }
    let per_sample = samples
        .iter()
        .take(n_samples)
        .map(|s| grads_for(params, spec, vocab, &[s]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaseFisher::from_raw(mean_of_squares(&per_sample)?))
}

/// L2 norm of each group's gradient over `k` consecutive minibatches.
pub fn group_gradient_norms(
    params: &ParamStore,
    spec: &TaskSpec,
    samples: &[Sample],
    vocab: &Vocab,
    k: usize,
    batch_size: usize,
) -> Result<BTreeMap<Group, Vec<f64>>> {
    if batch_size == 0 || samples.len() < k * batch_size {
        bail!(Input, "{} samples cannot fill {k} minibatches of {batch_size}", samples.len());
    }
    let mut norms: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
    for chunk in samples.chunks(batch_size).take(k) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let grads = grads_for(params, spec, vocab, &refs)?;
        let mut sq: BTreeMap<Group, f64> = Group::CORE.iter().map(|&g| (g, 0.0)).collect();
        for (name, g) in &grads {
            *sq.entry(params.group(name)).or_insert(0.0) += g.iter().map(|v| v * v).sum::<f64>();
        }
        for (group, s) in sq {
            norms.entry(group).or_default().push(s.sqrt());
        }
    }
    Ok(norms)
}

/// `S = σ(-Var)` per group, with `Var` the population variance of the
/// group's gradient-norm samples. Never returns exactly zero.
pub fn stability_factor(norms: &BTreeMap<Group, Vec<f64>>) -> Result<BTreeMap<Group, f64>> {
    norms
        .iter()
        .map(|(&g, samples)| {
            if samples.len() < 2 {
                bail!(Input, "stability of group {g} needs at least 2 gradient samples, got {}", samples.len());
            }
            let var = population_stats(samples).1.powi(2);
            // exp(var) overflows past var ≈ 709; the floor keeps S strictly positive.
            Ok((g, (1.0 / (1.0 + var.exp())).max(f64::MIN_POSITIVE)))
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn population_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation of the four probed layers over a probe batch.
pub fn activation_stats(params: &ParamStore, spec: &TaskSpec, probe: &[Sample], vocab: &Vocab) -> Result<ActivationStats> {
    if probe.is_empty() {
        bail!(Input, "activation statistics need a nonempty probe");
    }
    let refs: Vec<&Sample> = probe.iter().collect();
    let batch = Batch::new(&refs, spec, vocab, None)?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let trace = forward_on_tape(&params.config, &mut tape, &vars, &batch.images, &batch.prompts)?;
    let per_layer = trace.taps.iter().map(|&t| population_stats(tape.value(t).data())).collect();
    Ok(ActivationStats { per_layer })
}

/// Mean over layers of `1 / (1 + |Δμ| + |Δσ|)`.
pub fn task_similarity(prev: &ActivationStats, cur: &ActivationStats) -> Result<f64> {
    let l = prev.per_layer.len();
    if l == 0 || l != cur.per_layer.len() {
        bail!(Input, "activation statistics cover {} vs {} layers", l, cur.per_layer.len());
    }
    let sum: f64 = prev
        .per_layer
        .iter()
        .zip(&cur.per_layer)
        .map(|(a, b)| 1.0 / (1.0 + (a.0 - b.0).abs() + (a.1 - b.1).abs()))
        .sum();
    Ok(sum / l as f64)
}

/// `F_m = F_base,m · S_m · A`, scaling each block by its group's stability.
pub fn adaptive_fisher(
    base: &BlockArrays,
    groups: &IndexMap<String, Group>,
    stability: &BTreeMap<Group, f64>,
    similarity: f64,
) -> Result<BlockArrays> {
    base.iter()
        .map(|(name, values)| {
            let g = groups.get(name).copied().unwrap_or(Group::Unassigned);
            let Some(&s) = stability.get(&g) else {
                bail!(State, "no stability factor for group {g} (block `{name}`)");
            };
            Ok((name.clone(), values.iter().map(|v| v * s * similarity).collect()))
        })
        .collect()
}

/// Mean adaptive-Fisher entry of each core group; zero for empty groups.
pub fn group_means(fisher: &BlockArrays, groups: &IndexMap<String, Group>) -> BTreeMap<Group, f64> {
    let mut acc: BTreeMap<Group, (f64, usize)> = Group::CORE.iter().map(|&g| (g, (0.0, 0))).collect();
    for (name, values) in fisher {
        let g = groups.get(name).copied().unwrap_or(Group::Unassigned);
        let e = acc.entry(g).or_insert((0.0, 0));
        e.0 += values.iter().sum::<f64>();
        e.1 += values.len();
    }
    acc.into_iter().map(|(g, (s, n))| (g, if n == 0 { 0.0 } else { s / n as f64 })).collect()
}

/// `w = F × (1 + C_i / C_max)`.
pub fn adaptive_weight(fisher_group_scalar: f64, complexity: f64, complexity_max: f64) -> Result<f64> {
    if complexity_max <= 0.0 {
        bail!(Input, "maximum complexity must be positive, got {complexity_max}");
    }
    if complexity < 0.0 {
        bail!(Input, "complexity must be nonnegative, got {complexity}");
    }
    Ok(fisher_group_scalar * (1.0 + complexity / complexity_max))
}
