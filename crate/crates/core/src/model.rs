//! Toy prompt-conditioned segmentation network.
//!
//! | region   | blocks                                             |
//! |----------|----------------------------------------------------|
//! | vision   | `vision.patch.{w,b}`, `vision.pos`, `vision.mlp{1,2}.{w,b}` |
//! | text     | `text.embed`, `text.proj.{w,b}`                    |
//! | fusion   | `xattn.{q,v,o}.{w,b}`, `xattn.k.w`                 |
//! | decoder  | `decoder.hidden.{w,b}`, `decoder.out.{w,b}`        |
//!
//! Images are cut into non-overlapping patches, embedded, given a learned
//! position code and passed through a residual MLP. Prompts are embedded per
//! token and projected; the projected tokens serve as cross-attention keys and
//! values for the patch queries, and their mean is added to every patch as a
//! global conditioning vector. A per-patch MLP emits two logits which are
//! upsampled (nearest neighbour) to pixels.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { image_size: 32, channels: 3, patch_size: 4, embed_dim: 32, vocab_size: 128, n_heads: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            bail!(Config, "image_size {} not divisible by patch_size {}", self.image_size, self.patch_size);
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            bail!(Config, "embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads);
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// `(name, shape, fan_in)` for every block, in registration order. A
    /// fan-in of zero marks a zero-initialised bias; lookup tables use their
    /// row width.
    pub fn architecture(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (d, p, v) = (self.embed_dim, self.patch_dim(), self.vocab_size);
        vec![
            ("vision.patch.w", vec![p, d], p),
            ("vision.patch.b", vec![d], 0),
            ("vision.pos", vec![self.patches(), d], d),
            ("vision.mlp1.w", vec![d, d], d),
            ("vision.mlp1.b", vec![d], 0),
            ("vision.mlp2.w", vec![d, d], d),
            ("vision.mlp2.b", vec![d], 0),
            ("text.embed", vec![v, d], d),
            ("text.proj.w", vec![d, d], d),
            ("text.proj.b", vec![d], 0),
            ("xattn.q.w", vec![d, d], d),
            ("xattn.q.b", vec![d], 0),
            ("xattn.k.w", vec![d, d], d),
            ("xattn.v.w", vec![d, d], d),
            ("xattn.v.b", vec![d], 0),
            ("xattn.o.w", vec![d, d], d),
            ("xattn.o.b", vec![d], 0),
            ("decoder.hidden.w", vec![d, d], d),
            ("decoder.hidden.b", vec![d], 0),
            ("decoder.out.w", vec![d, 2], d),
            ("decoder.out.b", vec![2], 0),
        ]
    }
}

/// Functional group of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Visual,
    Spatial,
    Medical,
    Unassigned,
}

impl Group {
    /// The three prompt-response groups, in tie-break order.
    pub const CORE: [Group; 3] = [Group::Visual, Group::Spatial, Group::Medical];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Visual => "visual",
            Group::Spatial => "spatial",
            Group::Medical => "medical",
            Group::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Group::Visual, Group::Spatial, Group::Medical, Group::Unassigned]
            .into_iter()
            .find(|g| g.as_str() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named parameter blocks plus their group tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    pub config: ModelConfig,
    blocks: IndexMap<String, Tensor<T>>,
    group_of: IndexMap<String, Group>,
}

/// Tape handles of every registered block, by name.
pub type ParamVars = IndexMap<String, Var>;

impl<T: Scalar> ParamStore<T> {
    pub fn from_blocks(config: ModelConfig, blocks: IndexMap<String, Tensor<T>>) -> Self {
        let group_of = blocks.keys().map(|k| (k.clone(), Group::Unassigned)).collect();
        Self { config, blocks, group_of }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.blocks.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.blocks.get_mut(name)
    }

    pub fn group(&self, name: &str) -> Group {
        self.group_of.get(name).copied().unwrap_or(Group::Unassigned)
    }

    pub fn groups(&self) -> &IndexMap<String, Group> {
        &self.group_of
    }

    pub fn set_group(&mut self, name: &str, group: Group) -> Result<()> {
        match self.group_of.get_mut(name) {
            Some(g) => {
                *g = group;
                Ok(())
            }
            None => bail!(Input, "unknown parameter block `{name}`"),
        }
    }

    pub fn set_groups(&mut self, assignment: &IndexMap<String, Group>) -> Result<()> {
        for (name, &g) in assignment {
            self.set_group(name, g)?;
        }
        Ok(())
    }

    pub fn n_scalars(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.values().all(Tensor::is_finite)
    }

    /// Sets `requires_grad` on every block whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.blocks.iter_mut() {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    /// Registers every block on `tape`; frozen blocks become constants.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        self.blocks.iter().map(|(name, t)| (name.clone(), tape.param(name, t))).collect()
    }

    /// Registers every block as an untracked constant.
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        self.blocks.iter().map(|(name, t)| (name.clone(), tape.constant(t.clone()))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            group_of: self.group_of.clone(),
        }
    }
}

/// Creates and initialises the parameters for `cfg`.
///
/// Weights are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases start
/// at zero. Every block is trainable and unassigned.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = IndexMap::new();
    for (name, shape, fan_in) in cfg.architecture() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if fan_in == 0 {
            vec![T::zero(); n]
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        };
        let t = Tensor::new(shape, data)?.with_grad();
        blocks.insert(name.to_string(), t);
    }
    Ok(ParamStore::from_blocks(cfg.clone(), blocks))
}

/// Per-pixel two-class logits, `[batch, 2, H, W]`; channel 1 is foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLogits<T: Scalar = f64> {
    pub values: Tensor<T>,
}

/// Handles produced by one forward pass on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Activation probes: vision embedding, pooled text, cross-attention
    /// output, decoder hidden layer.
    pub taps: [Var; 4],
}

/// Rearranges `[batch, C, H, W]` into `[batch * patches, C * p * p]`, patches
/// in row-major grid order.
pub fn patchify<T: Scalar>(cfg: &ModelConfig, image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    let side = cfg.image_size;
    if s.len() != 4 || s[1] != cfg.channels || s[2] != side || s[3] != side {
        bail!(
            Input,
            "image shape {:?} does not match [batch, {}, {side}, {side}]",
            s,
            cfg.channels
        );
    }
    let (batch, ch, p, g) = (s[0], cfg.channels, cfg.patch_size, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..ch {
                    for py in 0..p {
                        let row = ((b * ch + c) * side + gy * p + py) * side + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * g * g, cfg.patch_dim()], out)
}

fn check_prompts(cfg: &ModelConfig, batch: usize, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
    if prompts.len() != batch {
        bail!(Input, "{} prompts for a batch of {batch}", prompts.len());
    }
    let mut offsets = Vec::with_capacity(batch + 1);
    offsets.push(0);
    for (i, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            bail!(Input, "prompt {i} is empty");
        }
        if let Some(&bad) = p.iter().find(|&&t| t >= cfg.vocab_size) {
            bail!(Input, "prompt {i}: token id {bad} out of range for vocab {}", cfg.vocab_size);
        }
        offsets.push(offsets[i] + p.len());
    }
    Ok(offsets)
}

/// Records the forward pass on `tape` using already-registered parameters.
pub fn forward_on_tape<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    vars: &ParamVars,
    image: &Tensor<T>,
    prompts: &[Vec<usize>],
) -> Result<ForwardTrace> {
    let patches = patchify(cfg, image)?;
    let batch = image.shape()[0];
    let offsets = check_prompts(cfg, batch, prompts)?;
    let n_patch = cfg.patches();
    let p = |name: &str| vars[name];

    let linear = |tape: &mut Tape<T>, x: Var, layer: &str| -> Result<Var> {
        let h = tape.matmul(x, p(&format!("{layer}.w")))?;
        tape.add_row(h, p(&format!("{layer}.b")))
    };

    // vision
    let x = tape.constant(patches);
    let x = linear(tape, x, "vision.patch")?;
    let pos = tape.tile_rows(p("vision.pos"), batch)?;
    let x = tape.add(x, pos)?;
    let h = linear(tape, x, "vision.mlp1")?;
    let h = tape.relu(h);
    let h = linear(tape, h, "vision.mlp2")?;
    let vis = tape.add(x, h)?;

    // text
    let ids: Vec<usize> = prompts.iter().flatten().copied().collect();
    let emb = tape.embedding(p("text.embed"), &ids)?;
    let tokens = linear(tape, emb, "text.proj")?;
    let pooled = tape.segment_mean(tokens, &offsets)?;

    // fusion
    let q = linear(tape, vis, "xattn.q")?;
    // A key bias would shift every score of a query equally and cancel in
    // the softmax, so the key projection has none.
    let k = tape.matmul(tokens, p("xattn.k.w"))?;
    let v = linear(tape, tokens, "xattn.v")?;
    let att = tape.cross_attention(q, k, v, n_patch, &offsets, cfg.n_heads)?;
    let att = linear(tape, att, "xattn.o")?;
    let fused = tape.add(vis, att)?;
    let global = tape.repeat_rows(pooled, n_patch)?;
    let fused = tape.add(fused, global)?;

    // decoder
    let hid = linear(tape, fused, "decoder.hidden")?;
    let hid = tape.relu(hid);
    let out = linear(tape, hid, "decoder.out")?;
    let logits = tape.upsample_patches(out, cfg.grid(), cfg.patch_size)?;
    Ok(ForwardTrace { logits, taps: [vis, pooled, att, hid] })
}

/// Evaluates the network without recording gradients.
pub fn forward<T: Scalar>(params: &ParamStore<T>, image: &Tensor<T>, prompts: &[Vec<usize>]) -> Result<SegLogits<T>> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let trace = forward_on_tape(&params.config, &mut tape, &vars, image, prompts)?;
    Ok(SegLogits { values: tape.value(trace.logits).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * cfg.channels * cfg.image_size * cfg.image_size;
        let data = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![batch, cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = build_model::<f64>(&cfg, 43).unwrap();
        let b = build_model::<f64>(&cfg, 43).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f64>(&cfg, 44).unwrap();
        assert_ne!(a, c);
        assert!(a.groups().values().all(|&g| g == Group::Unassigned));
    }

    #[test]
    fn block_count_matches_architecture_table() {
        // 7 vision + 3 text + 7 cross-attention + 4 decoder blocks.
        let p = build_model::<f64>(&ModelConfig::default(), 43).unwrap();
        assert_eq!(p.len(), 7 + 3 + 7 + 4);
        for prefix in ["vision.", "text.", "xattn.", "decoder."] {
            assert!(p.names().any(|n| n.starts_with(prefix)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { embed_dim: 33, n_heads: 2, ..Default::default() };
        assert!(matches!(build_model::<f64>(&cfg, 43), Err(crate::Error::Config(_))));
        let cfg = ModelConfig { image_size: 30, patch_size: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_bounded() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        for (name, shape, fan_in) in cfg.architecture() {
            let t = p.get(name).unwrap();
            assert_eq!(t.shape(), shape.as_slice());
            if fan_in == 0 {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        let x = image(&cfg, 2, 1);
        let out = forward(&p, &x, &[vec![1, 2], vec![3]]).unwrap();
        assert_eq!(out.values.shape(), &[2, 2, 32, 32]);
        assert!(out.values.is_finite());
        let zero = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(forward(&p, &zero, &[vec![5]]).unwrap().values.is_finite());
    }

    #[test]
    fn prompts_change_logits() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        let x = image(&cfg, 1, 2);
        let a = forward(&p, &x, &[vec![10, 11]]).unwrap();
        let b = forward(&p, &x, &[vec![12, 13, 14]]).unwrap();
        assert_ne!(a.values.data(), b.values.data());
    }

    #[test]
    fn bad_prompts_rejected() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        let x = image(&cfg, 1, 3);
        assert!(matches!(forward(&p, &x, &[vec![]]), Err(crate::Error::Input(_))));
        assert!(matches!(forward(&p, &x, &[vec![128]]), Err(crate::Error::Input(_))));
        assert!(matches!(forward(&p, &x, &[vec![1], vec![2]]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn forward_does_not_mutate_params() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        let before = p.clone();
        forward(&p, &image(&cfg, 1, 4), &[vec![1]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn f32_instantiation_tracks_f64() {
        let cfg = ModelConfig::default();
        let p = build_model::<f64>(&cfg, 43).unwrap();
        let x = image(&cfg, 1, 5);
        let a = forward(&p, &x, &[vec![7, 8]]).unwrap();
        let b = forward(&p.cast::<f32>(), &x.cast::<f32>(), &[vec![7, 8]]).unwrap();
        for (u, v) in a.values.data().iter().zip(b.values.data()) {
            assert!((u - *v as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn patchify_layout() {
        let cfg = ModelConfig { image_size: 4, channels: 1, patch_size: 2, ..Default::default() };
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[12..], &[10., 11., 14., 15.]);
    }
}
