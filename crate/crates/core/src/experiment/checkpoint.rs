//! Binary container for parameter stores and Fisher snapshots.
//!
//! A file is one line of compact UTF-8 JSON (the header) terminated by `\n`,
//! followed by the little-endian IEEE-754 `f64` values of every block,
//! concatenated in header order. The header records the format version, a
//! kind tag, free-form metadata and, per block, its name, shape, optional
//! group tag and offset (in values) into the payload.

use crate::fisher::FisherSnapshot;
use crate::model::{Group, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint payload truncated: header needs {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("block `{block}` has shape {found:?}, expected {expected:?}")]
    Shape { block: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub blocks: Vec<BlockEntry>,
}

/// A decoded file: header plus one flat array per block.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<(BlockEntry, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, group: Option<Group>, data: Vec<f64>) {
        self.blocks.push((BlockEntry { name: name.to_string(), shape, group, offset: None }, data));
    }

    pub fn to_bytes(&self) -> CkResult<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.blocks.len());
        for (e, data) in &self.blocks {
            if e.shape.iter().product::<usize>() != data.len() {
                return Err(CheckpointError::Format(format!("block `{}` data does not fill its shape", e.name)));
            }
            entries.push(BlockEntry { offset: Some(offset), ..e.clone() });
            offset += data.len();
        }
        let header = Header { version: FORMAT_VERSION, kind: self.kind.clone(), meta: self.meta.clone(), blocks: entries };
        let mut out = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        out.push(b'\n');
        out.reserve(offset * 8);
        for (_, data) in &self.blocks {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
            return Err(CheckpointError::Format("missing header terminator".into()));
        };
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: header.version, expected: FORMAT_VERSION });
        }
        let payload = &bytes[nl + 1..];
        let mut expected = 0usize;
        for b in &header.blocks {
            match b.offset {
                Some(o) if o == expected => expected += b.shape.iter().product::<usize>(),
                Some(o) => return Err(CheckpointError::Format(format!("block `{}` offset {o}, expected {expected}", b.name))),
                None => return Err(CheckpointError::Format(format!("block `{}` has no payload offset", b.name))),
            }
        }
        if payload.len() < expected * 8 {
            return Err(CheckpointError::Truncated { expected: expected * 8, found: payload.len() });
        }
        if payload.len() > expected * 8 {
            return Err(CheckpointError::Format(format!("{} trailing payload bytes", payload.len() - expected * 8)));
        }
        let blocks = header
            .blocks
            .into_iter()
            .map(|e| {
                let start = e.offset.unwrap_or(0) * 8;
                let n: usize = e.shape.iter().product();
                let data = payload[start..start + n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                (e, data)
            })
            .collect();
        Ok(Self { kind: header.kind, meta: header.meta, blocks })
    }

    pub fn write(&self, path: &Path) -> CkResult<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CkResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> CkResult<()> {
        if self.kind != kind {
            return Err(CheckpointError::Format(format!("expected a `{kind}` file, found `{}`", self.kind)));
        }
        Ok(())
    }
}

/// Encodes parameters with their group tags; the model config goes in the
/// metadata.
pub fn params_to_container(params: &ParamStore) -> CkResult<Container> {
    if !params.is_finite() {
        return Err(CheckpointError::Format("refusing to save non-finite parameters".into()));
    }
    let meta = serde_json::to_value(&params.config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut c = Container::new("params", meta);
    for (name, t) in params.iter() {
        c.push(name, t.shape().to_vec(), Some(params.group(name)), t.data().to_vec());
    }
    Ok(c)
}

pub fn save_params(params: &ParamStore, path: &Path) -> CkResult<()> {
    params_to_container(params)?.write(path)
}

/// Decodes a parameter file, checking every block against the architecture
/// of the stored model config.
pub fn params_from_container(c: &Container) -> CkResult<ParamStore> {
    c.expect_kind("params")?;
    let config: ModelConfig = serde_json::from_value(c.meta.clone()).map_err(|e| CheckpointError::Format(format!("model config: {e}")))?;
    let arch = config.architecture();
    if arch.len() != c.blocks.len() {
        return Err(CheckpointError::Format(format!("{} blocks stored, architecture has {}", c.blocks.len(), arch.len())));
    }
    let mut blocks = IndexMap::new();
    let mut groups = IndexMap::new();
    for ((name, shape, _), (entry, data)) in arch.iter().zip(&c.blocks) {
        if entry.name != *name {
            return Err(CheckpointError::Format(format!("block `{}` where `{name}` was expected", entry.name)));
        }
        if entry.shape != *shape {
            return Err(CheckpointError::Shape { block: entry.name.clone(), expected: shape.clone(), found: entry.shape.clone() });
        }
        let t = Tensor::new(entry.shape.clone(), data.clone()).map_err(|e| CheckpointError::Format(e.to_string()))?;
        blocks.insert(entry.name.clone(), t.with_grad());
        groups.insert(entry.name.clone(), entry.group.unwrap_or(Group::Unassigned));
    }
    let mut store = ParamStore::from_blocks(config, blocks);
    store.set_groups(&groups).map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok(store)
}

pub fn load_params(path: &Path) -> CkResult<ParamStore> {
    params_from_container(&Container::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    task_id: usize,
    group_weight: std::collections::BTreeMap<Group, f64>,
    stability: std::collections::BTreeMap<Group, f64>,
    similarity: f64,
    complexity: f64,
    activation_stats: crate::fisher::ActivationStats,
}

/// Encodes a snapshot as `fisher/<block>` and `anchor/<block>` arrays.
pub fn snapshot_to_container(snap: &FisherSnapshot, params: &ParamStore) -> CkResult<Container> {
    let meta = SnapshotMeta {
        task_id: snap.task_id,
        group_weight: snap.group_weight.clone(),
        stability: snap.stability.clone(),
        similarity: snap.similarity,
        complexity: snap.complexity,
        activation_stats: snap.activation_stats.clone(),
    };
    let mut c = Container::new("fisher", serde_json::to_value(&meta).map_err(|e| CheckpointError::Format(e.to_string()))?);
    for (prefix, arrays) in [("fisher", &snap.per_block_fisher), ("anchor", &snap.anchor)] {
        for (name, data) in arrays {
            let shape = params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![data.len()]);
            c.push(&format!("{prefix}/{name}"), shape, snap.groups.get(name).copied(), data.clone());
        }
    }
    Ok(c)
}

pub fn snapshot_from_container(c: &Container) -> CkResult<FisherSnapshot> {
    c.expect_kind("fisher")?;
    let meta: SnapshotMeta = serde_json::from_value(c.meta.clone()).map_err(|e| CheckpointError::Format(format!("snapshot meta: {e}")))?;
    let mut snap = FisherSnapshot::empty(meta.task_id);
    snap.group_weight = meta.group_weight;
    snap.stability = meta.stability;
    snap.similarity = meta.similarity;
    snap.complexity = meta.complexity;
    snap.activation_stats = meta.activation_stats;
    for (entry, data) in &c.blocks {
        let (target, name) = match entry.name.split_once('/') {
            Some(("fisher", n)) => (&mut snap.per_block_fisher, n),
            Some(("anchor", n)) => (&mut snap.anchor, n),
            _ => return Err(CheckpointError::Format(format!("unexpected snapshot block `{}`", entry.name))),
        };
        target.insert(name.to_string(), data.clone());
        if let Some(g) = entry.group {
            snap.groups.insert(name.to_string(), g);
        }
    }
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small() -> ParamStore {
        let cfg = ModelConfig { image_size: 8, patch_size: 4, embed_dim: 4, vocab_size: 16, ..Default::default() };
        let mut p: ParamStore = build_model(&cfg, 43).unwrap();
        p.set_group("text.embed", Group::Medical).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = small();
        let a = params_to_container(&p).unwrap().to_bytes().unwrap();
        let q = params_from_container(&Container::from_bytes(&a).unwrap()).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.group("text.embed"), Group::Medical);
        let b = params_to_container(&q).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = params_to_container(&small()).unwrap().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(Container::from_bytes(cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn version_is_checked() {
        let bytes = params_to_container(&small()).unwrap().to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let head = String::from_utf8(bytes[..nl].to_vec()).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        let mut fixed = head.into_bytes();
        fixed.extend_from_slice(&bytes[nl..]);
        assert!(matches!(Container::from_bytes(&fixed), Err(CheckpointError::Version { found: 9, .. })));
    }

    #[test]
    fn missing_offset_is_a_format_error() {
        let c = params_to_container(&small()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut header: Header = serde_json::from_slice(&bytes[..nl]).unwrap();
        header.blocks[2].offset = None;
        let mut out = serde_json::to_vec(&header).unwrap();
        out.extend_from_slice(&bytes[nl..]);
        assert!(matches!(Container::from_bytes(&out), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let p = small();
        let mut c = params_to_container(&p).unwrap();
        c.blocks[0].0.shape = vec![c.blocks[0].1.len(), 1];
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert!(matches!(params_from_container(&back), Err(CheckpointError::Shape { .. })));
    }

    #[test]
    fn snapshot_round_trip() {
        let p = small();
        let mut s = FisherSnapshot::empty(3);
        s.anchor = p.iter().map(|(k, t)| (k.to_string(), t.data().to_vec())).collect();
        s.per_block_fisher = p.iter().map(|(k, t)| (k.to_string(), vec![0.5; t.len()])).collect();
        s.groups = p.groups().clone();
        s.group_weight = [(Group::Visual, 1.5)].into();
        s.similarity = 0.75;
        let c = snapshot_to_container(&s, &p).unwrap();
        let back = snapshot_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
