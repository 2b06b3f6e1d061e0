//! Gradient-response classification of parameter blocks into visual,
//! spatial and medical groups.

use crate::autodiff::Tape;
use crate::error::{bail, Error, Result};
use crate::model::{forward_on_tape, Group, ParamStore};
use crate::objectives::seg_ce;
use crate::prompts::{Tier, Vocab};
use crate::synth::{Batch, Sample, TaskSpec};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Prompt category probed for each group, in tie-break order.
pub const CATEGORIES: [(Group, Tier); 3] = [(Group::Visual, Tier::Visual), (Group::Spatial, Tier::Spatial), (Group::Medical, Tier::Medical)];

/// Mean gradient L2 norm of every block under each prompt category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    /// Block name to `[visual, spatial, medical]` responses.
    pub rows: IndexMap<String, [f64; 3]>,
}

impl ResponseMatrix {
    pub fn row(&self, block: &str) -> Option<[f64; 3]> {
        self.rows.get(block).copied()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { rows: self.rows.iter().map(|(k, r)| (k.clone(), r.map(|v| v * c))).collect() }
    }
}

/// Measures each block's gradient response to the probe prompts re-rendered
/// at the visual, spatial and medical tiers. Parameters are not modified.
pub fn probe_responses(params: &ParamStore, spec: &TaskSpec, probe: &[Sample], vocab: &Vocab, n_samples: usize) -> Result<ResponseMatrix> {
    if probe.is_empty() {
        bail!(Input, "probe set is empty");
    }
    if n_samples == 0 {
        bail!(Input, "probe needs at least one sample");
    }
    let used = &probe[..n_samples.min(probe.len())];
    let mut rows: IndexMap<String, [f64; 3]> = params.names().map(|n| (n.to_string(), [0.0; 3])).collect();
    for (col, &(_, tier)) in CATEGORIES.iter().enumerate() {
        for sample in used {
            let batch = Batch::new(&[sample], spec, vocab, Some(tier))?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let trace = forward_on_tape(&params.config, &mut tape, &vars, &batch.images, &batch.prompts)?;
            let loss = seg_ce(&mut tape, trace.logits, &batch.masks)?;
            for (name, g) in tape.backward(loss)?.iter() {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if let Some(row) = rows.get_mut(name) {
                    row[col] += norm / used.len() as f64;
                }
            }
        }
    }
    if let Some((name, _)) = rows.iter().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
        bail!(Numeric, "non-finite response for block `{name}`");
    }
    Ok(ResponseMatrix { rows })
}

/// Argmax of each row; ties go to the earlier category.
pub fn classify(matrix: &ResponseMatrix) -> Result<IndexMap<String, Group>> {
    matrix
        .rows
        .iter()
        .map(|(name, row)| {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::DeadBlock { block: name.clone() });
            }
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            Ok((name.clone(), CATEGORIES[best].0))
        })
        .collect()
}

/// Writes `{block: group}` as pretty JSON.
pub fn dump_assignment(assignment: &IndexMap<String, Group>, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(assignment)?)?;
    Ok(())
}

/// Fraction of blocks with the given prefix assigned to `group`.
pub fn share(assignment: &IndexMap<String, Group>, prefix: &str, group: Group) -> f64 {
    let matching: Vec<Group> = assignment.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, &g)| g).collect();
    if matching.is_empty() {
        return 0.0;
    }
    matching.iter().filter(|&&g| g == group).count() as f64 / matching.len() as f64
}
