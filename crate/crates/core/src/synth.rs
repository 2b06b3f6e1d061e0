//! Synthetic segmentation tasks standing in for distinct imaging modalities.
//!
//! Each task renders one filled shape family on a task-specific background,
//! adds Gaussian pixel noise, and pairs the exact mask with a prompt whose
//! visual and spatial words describe the rendered object.

use crate::error::{bail, Result};
use crate::prompts::{describe, subject_for_task, ObjectFacts, PromptSpec, Subject, Tier, Vocab, COLOR_WORDS, SIZE_WORDS};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CHANNELS: usize = 3;
/// Items of the train split reserved for probing (classification, activation
/// statistics).
pub const PROBE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blob,
    Ring,
    Box,
    Stripe,
    Crescent,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Blob => "blob",
            Family::Ring => "ring",
            Family::Box => "box",
            Family::Stripe => "stripe",
            Family::Crescent => "crescent",
        }
    }
}

/// Inclusive-exclusive intensity range per RGB channel.
pub type ColorProfile = [(f64, f64); CHANNELS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family: Family,
    pub color_profile: ColorProfile,
    pub background: ColorProfile,
    /// Bounds on the fraction of image pixels covered by the mask.
    pub size_range: (f64, f64),
    /// Allowed `(row, col)` cells of the 3x3 placement grid.
    pub position_grid: Vec<(usize, usize)>,
    pub noise_sigma: f64,
    pub subject: Subject,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            bail!(Config, "task {}: size_range {:?} must satisfy 0 < min < max < 1", self.task_id, self.size_range);
        }
        let min_px = (lo * (self.image_size * self.image_size) as f64).ceil();
        if min_px < 1.0 || self.image_size < 6 {
            bail!(Config, "task {}: image of side {} cannot hold size_range {:?}", self.task_id, self.image_size, self.size_range);
        }
        if self.position_grid.is_empty() || self.position_grid.iter().any(|&(r, c)| r > 2 || c > 2) {
            bail!(Config, "task {}: position grid must name cells of a 3x3 grid", self.task_id);
        }
        if self.n_train < PROBE_SIZE || self.n_val == 0 || self.n_test == 0 {
            bail!(Config, "task {}: splits too small ({}/{}/{})", self.task_id, self.n_train, self.n_val, self.n_test);
        }
        if self.noise_sigma < 0.0 {
            bail!(Config, "task {}: negative noise", self.task_id);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` intensities.
    pub image: Tensor,
    /// Row-major `H * W` binary mask.
    pub mask: Vec<u8>,
    pub facts: ObjectFacts,
    pub prompt: PromptSpec,
}

impl Sample {
    pub fn mask_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A realized task: its three splits rendered with one prompt tier.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub tier: Tier,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    /// Fixed subset of the training split, never used for updates.
    pub fn probe(&self) -> &[Sample] {
        &self.train[..PROBE_SIZE.min(self.train.len())]
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptSpec> {
        self.train.iter().map(|s| &s.prompt)
    }
}

/// Image, mask and token tensors of a minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    /// `[B, H, W]` with values in {0, 1}
    pub masks: Tensor,
    pub prompts: Vec<Vec<usize>>,
}

impl Batch {
    /// Stacks samples; `tier` re-renders every prompt at another tier.
    pub fn new(samples: &[&Sample], spec: &TaskSpec, vocab: &Vocab, tier: Option<Tier>) -> Result<Self> {
        let Some(first) = samples.first() else {
            bail!(Input, "empty batch");
        };
        let img_len = first.image.len();
        let side = spec.image_size;
        let mut images = Vec::with_capacity(samples.len() * img_len);
        let mut masks = Vec::with_capacity(samples.len() * side * side);
        let mut prompts = Vec::with_capacity(samples.len());
        for s in samples {
            images.extend_from_slice(s.image.data());
            masks.extend(s.mask.iter().map(|&m| f64::from(m)));
            let prompt = match tier {
                Some(t) => describe(t, spec.task_id, &spec.subject, &s.facts),
                None => s.prompt.clone(),
            };
            prompts.push(vocab.encode(&prompt.text));
        }
        let b = samples.len();
        Ok(Self {
            images: Tensor::new(vec![b, CHANNELS, side, side], images)?,
            masks: Tensor::new(vec![b, side, side], masks)?,
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

const PALETTE: [(&str, [f64; 3]); 9] = [
    ("pink", [0.9, 0.55, 0.6]),
    ("red", [0.75, 0.15, 0.15]),
    ("brown", [0.5, 0.3, 0.15]),
    ("dark", [0.12, 0.1, 0.1]),
    ("white", [0.9, 0.9, 0.9]),
    ("gray", [0.5, 0.5, 0.5]),
    ("yellow", [0.9, 0.85, 0.3]),
    ("green", [0.3, 0.7, 0.3]),
    ("blue", [0.3, 0.4, 0.85]),
];

/// Nearest named colour.
pub fn color_word(rgb: [f64; 3]) -> &'static str {
    debug_assert_eq!(PALETTE.len(), COLOR_WORDS.len());
    PALETTE
        .iter()
        .min_by(|a, b| dist2(a.1, rgb).total_cmp(&dist2(b.1, rgb)))
        .map(|(n, _)| *n)
        .unwrap()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Size bucket of a mask covering `frac` of the image within `range`.
pub fn size_word(frac: f64, range: (f64, f64)) -> &'static str {
    let t = ((frac - range.0) / (range.1 - range.0)).clamp(0.0, 1.0);
    SIZE_WORDS[((t * 3.0) as usize).min(2)]
}

struct Placement {
    cy: f64,
    cx: f64,
    area: f64,
    aspect: f64,
    angle: f64,
}

fn inside(family: Family, p: &Placement, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - p.cy, x - p.cx);
    let (s, c) = p.angle.sin_cos();
    // coordinates in the object frame
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    match family {
        Family::Blob => {
            let r = (p.area / PI).sqrt();
            let (a, b) = (r * p.aspect.sqrt(), r / p.aspect.sqrt());
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        }
        Family::Ring => {
            let outer = (p.area / (PI * (1.0 - 0.55f64.powi(2)))).sqrt();
            let d2 = u * u + v * v;
            d2 <= outer * outer && d2 >= (0.55 * outer).powi(2)
        }
        Family::Box => {
            let w = (p.area * p.aspect).sqrt();
            let h = p.area / w;
            u.abs() <= w / 2.0 && v.abs() <= h / 2.0
        }
        Family::Stripe => {
            let t = 3.0;
            let len = p.area / t;
            u.abs() <= len / 2.0 && v.abs() <= t / 2.0
        }
        Family::Crescent => {
            // disk minus a disk shifted by 0.6 r; remaining area ≈ 1.1818 r²
            let r = (p.area / 1.1818).sqrt();
            let d2 = u * u + v * v;
            let shifted = (u - 0.6 * r).powi(2) + v * v;
            d2 <= r * r && shifted > r * r
        }
    }
}

fn render_one(spec: &TaskSpec, tier: Tier, seed: u64) -> Result<Sample> {
    let side = spec.image_size;
    let n_px = (side * side) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = side as f64 / 3.0;
    let (lo, hi) = spec.size_range;
    for _ in 0..200 {
        let (row, col) = spec.position_grid[rng.random_range(0..spec.position_grid.len())];
        let jitter = cell / 6.0;
        let placement = Placement {
            cy: (row as f64 + 0.5) * cell + rng.random_range(-jitter..jitter),
            cx: (col as f64 + 0.5) * cell + rng.random_range(-jitter..jitter),
            area: rng.random_range(lo..hi) * n_px,
            aspect: rng.random_range(0.7..1.4),
            angle: match spec.family {
                Family::Box => 0.0,
                Family::Stripe => PI / 4.0 * rng.random_range(0..4) as f64,
                _ => rng.random_range(0.0..2.0 * PI),
            },
        };
        let mut mask = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                if inside(spec.family, &placement, y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * side + x] = 1;
                }
            }
        }
        let count = mask.iter().filter(|&&m| m == 1).count() as f64;
        if count < (lo * n_px).ceil() || count > (hi * n_px).floor() {
            continue;
        }
        let sample_color = |rng: &mut ChaCha8Rng, p: &ColorProfile| -> [f64; 3] {
            [rng.random_range(p[0].0..p[0].1), rng.random_range(p[1].0..p[1].1), rng.random_range(p[2].0..p[2].1)]
        };
        let fg = sample_color(&mut rng, &spec.color_profile);
        let bg = sample_color(&mut rng, &spec.background);
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| crate::Error::Config(e.to_string()))?;
        let mut image = vec![0.0; CHANNELS * side * side];
        for ch in 0..CHANNELS {
            for i in 0..side * side {
                let base = if mask[i] == 1 { fg[ch] } else { bg[ch] };
                image[ch * side * side + i] = base + noise.sample(&mut rng);
            }
        }
        let facts = ObjectFacts {
            size_word: size_word(count / n_px, spec.size_range).to_string(),
            color_word: color_word(fg).to_string(),
            cell: (row, col),
        };
        let prompt = describe(tier, spec.task_id, &spec.subject, &facts);
        return Ok(Sample { image: Tensor::new(vec![CHANNELS, side, side], image)?, mask, facts, prompt });
    }
    bail!(Config, "task {}: size_range {:?} incompatible with a {side}x{side} image", spec.task_id, spec.size_range)
}

/// Renders all three splits of a task with prompts of one tier.
pub fn make_task(spec: &TaskSpec, tier: Tier, seed: u64) -> Result<TaskDataset> {
    spec.validate()?;
    let split = |which: u64, n: usize| -> Result<Vec<Sample>> {
        (0..n).map(|i| render_one(spec, tier, derive_seed(seed, &[spec.task_id as u64, which, i as u64]))).collect()
    };
    Ok(TaskDataset {
        spec: spec.clone(),
        tier,
        train: split(0, spec.n_train)?,
        val: split(1, spec.n_val)?,
        test: split(2, spec.n_test)?,
    })
}

/// The five built-in task specifications and named task orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub seed: u64,
    pub specs: Vec<TaskSpec>,
    pub orders: Vec<(String, Vec<usize>)>,
}

impl Suite {
    pub fn order(&self, name: &str) -> Option<&[usize]> {
        self.orders.iter().find(|(n, _)| n == name).map(|(_, o)| o.as_slice())
    }

    pub fn order_names(&self) -> impl Iterator<Item = &str> {
        self.orders.iter().map(|(n, _)| n.as_str())
    }
}

/// Which prompt tier each task of a run is rendered with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TierPlan {
    Uniform(Tier),
    /// Spatial prompts for tasks whose objects may sit in more than three
    /// grid cells, visual prompts for the rest.
    TaskAdaptive,
}

impl TierPlan {
    pub fn tier_for(self, spec: &TaskSpec) -> Tier {
        match self {
            TierPlan::Uniform(t) => t,
            TierPlan::TaskAdaptive if spec.position_grid.len() > 3 => Tier::Spatial,
            TierPlan::TaskAdaptive => Tier::Visual,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TierPlan::Uniform(t) => t.as_str(),
            TierPlan::TaskAdaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for TierPlan {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(TierPlan::TaskAdaptive);
        }
        s.parse().map(TierPlan::Uniform).map_err(|_| crate::Error::Config(format!("unknown prompt tier `{s}`")))
    }
}

impl TryFrom<String> for TierPlan {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TierPlan> for String {
    fn from(p: TierPlan) -> String {
        p.name().to_string()
    }
}

/// Renders the tasks of `order` (indices into `suite.specs`) under `plan`.
pub fn make_sequence(suite: &Suite, order: &[usize], plan: TierPlan, seed: u64) -> Result<Vec<TaskDataset>> {
    order
        .iter()
        .map(|&i| {
            let Some(spec) = suite.specs.get(i) else {
                bail!(Input, "task index {i} outside the suite");
            };
            make_task(spec, plan.tier_for(spec), seed)
        })
        .collect()
}

pub const ORDER_NAMES: [&str; 5] = ["order_A", "order_B", "order_C", "order_D", "order_E"];

/// Five task families with distinct shape, colour and placement statistics.
pub fn default_suite(seed: u64) -> Suite {
    default_suite_sized(seed, 32, (256, 64, 64))
}

/// [`default_suite`] with a custom image side and split sizes.
pub fn default_suite_sized(seed: u64, image_size: usize, splits: (usize, usize, usize)) -> Suite {
    let all: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    let corners_and_center = vec![(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)];
    let middle_row = vec![(1, 0), (1, 1), (1, 2)];
    let grey = |lo: f64, hi: f64| [(lo, hi), (lo, hi), (lo, hi)];
    let rows: [(Family, ColorProfile, ColorProfile, (f64, f64), Vec<(usize, usize)>); 5] = [
        (Family::Blob, [(0.82, 0.95), (0.45, 0.6), (0.5, 0.65)], [(0.3, 0.42), (0.1, 0.2), (0.1, 0.2)], (0.05, 0.14), all.clone()),
        (Family::Ring, [(0.45, 0.6), (0.25, 0.38), (0.12, 0.22)], [(0.85, 0.95), (0.7, 0.8), (0.6, 0.7)], (0.06, 0.15), all),
        (Family::Box, grey(0.08, 0.2), grey(0.45, 0.55), (0.05, 0.14), corners_and_center),
        (Family::Stripe, grey(0.8, 0.92), grey(0.05, 0.15), (0.03, 0.07), middle_row),
        (Family::Crescent, [(0.2, 0.3), (0.1, 0.18), (0.05, 0.12)], [(0.8, 0.92), (0.5, 0.62), (0.52, 0.65)], (0.05, 0.13), vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]),
    ];
    let specs = rows
        .into_iter()
        .enumerate()
        .map(|(task_id, (family, color_profile, background, size_range, position_grid))| TaskSpec {
            task_id,
            family,
            color_profile,
            background,
            size_range,
            position_grid,
            noise_sigma: 0.05,
            subject: subject_for_task(task_id).expect("built-in subject"),
            n_train: splits.0,
            n_val: splits.1,
            n_test: splits.2,
            image_size,
        })
        .collect();
    let orders = [
        vec![0, 1, 2, 3, 4],
        vec![4, 3, 2, 1, 0],
        vec![2, 0, 4, 1, 3],
        vec![1, 3, 0, 4, 2],
        vec![3, 4, 1, 2, 0],
    ];
    Suite {
        seed,
        specs,
        orders: ORDER_NAMES.iter().map(|n| n.to_string()).zip(orders).collect(),
    }
}

/// Writes a dataset under `dir/<task>/<split>/`: `NNNN.pfm` images
/// (portable float map, colour, little-endian), `NNNN.pbm` masks (plain
/// portable bitmap) and `prompts.txt` with one prompt per line.
pub fn dump_dataset(data: &TaskDataset, dir: &Path) -> Result<()> {
    let side = data.spec.image_size;
    let root = dir.join(format!("task{}_{}", data.spec.task_id, data.spec.family.as_str()));
    for (name, items) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let out = root.join(name);
        fs::create_dir_all(&out)?;
        let mut prompts = String::new();
        for (i, s) in items.iter().enumerate() {
            let mut pfm = format!("PF\n{side} {side}\n-1.0\n").into_bytes();
            // PFM stores rows bottom to top with interleaved channels.
            for y in (0..side).rev() {
                for x in 0..side {
                    for ch in 0..CHANNELS {
                        let v = s.image.data()[(ch * side + y) * side + x] as f32;
                        pfm.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            fs::write(out.join(format!("{i:04}.pfm")), pfm)?;
            let mut pbm = format!("P1\n{side} {side}\n");
            for y in 0..side {
                let row: Vec<String> = (0..side).map(|x| s.mask[y * side + x].to_string()).collect();
                let _ = writeln!(pbm, "{}", row.join(" "));
            }
            fs::write(out.join(format!("{i:04}.pbm")), pbm)?;
            let _ = writeln!(prompts, "{}", s.prompt.sentence());
        }
        fs::write(out.join("prompts.txt"), prompts)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{position_words, Lexicon};

    fn small_suite() -> Suite {
        default_suite_sized(43, 32, (24, 8, 8))
    }

    #[test]
    fn suite_has_five_distinct_families_and_orders() {
        let s = default_suite(43);
        assert_eq!(s.specs.len(), 5);
        let mut fams: Vec<_> = s.specs.iter().map(|t| t.family).collect();
        fams.dedup();
        assert_eq!(fams.len(), 5);
        let a = s.order("order_A").unwrap();
        let b = s.order("order_B").unwrap();
        assert_ne!(a, b);
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
        assert_eq!(s.orders.len(), 5);
    }

    #[test]
    fn tier_plans_parse_and_adapt() {
        let s = small_suite();
        assert_eq!("adaptive".parse::<TierPlan>().unwrap(), TierPlan::TaskAdaptive);
        assert_eq!("basic".parse::<TierPlan>().unwrap(), TierPlan::Uniform(Tier::Basic));
        assert!("fancy".parse::<TierPlan>().is_err());
        let tiers: Vec<Tier> = s.specs.iter().map(|t| TierPlan::TaskAdaptive.tier_for(t)).collect();
        assert_eq!(tiers, [Tier::Spatial, Tier::Spatial, Tier::Spatial, Tier::Visual, Tier::Spatial]);
        let seq = make_sequence(&s, &[3, 0], TierPlan::TaskAdaptive, 43).unwrap();
        assert_eq!((seq[0].tier, seq[1].tier), (Tier::Visual, Tier::Spatial));
        assert!(make_sequence(&s, &[7], TierPlan::TaskAdaptive, 43).is_err());
        let json = serde_json::to_string(&TierPlan::TaskAdaptive).unwrap();
        assert_eq!(json, "\"adaptive\"");
    }

    #[test]
    fn masks_respect_size_range() {
        let s = small_suite();
        for spec in &s.specs {
            let d = make_task(spec, Tier::Basic, 43).unwrap();
            let n = (spec.image_size * spec.image_size) as f64;
            for item in d.train.iter().chain(&d.val).chain(&d.test) {
                let c = item.mask_pixels() as f64;
                assert!(c >= (spec.size_range.0 * n).ceil() && c <= (spec.size_range.1 * n).floor());
                assert!(c > 0.0);
            }
        }
    }

    #[test]
    fn spatial_prompts_name_the_actual_cell() {
        let s = small_suite();
        for spec in &s.specs {
            for tier in [Tier::Spatial, Tier::Comprehensive] {
                let d = make_task(spec, tier, 43).unwrap();
                for item in &d.train {
                    let (r, c) = item.facts.cell;
                    let words = position_words(r, c);
                    let tail = &item.prompt.text[item.prompt.text.len() - words.len()..];
                    assert_eq!(tail, words.as_slice());
                    // the object's centroid lies in that cell
                    let side = spec.image_size;
                    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                    for (i, &m) in item.mask.iter().enumerate() {
                        if m == 1 {
                            sy += (i / side) as f64 + 0.5;
                            sx += (i % side) as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                    let cell = side as f64 / 3.0;
                    let (cy, cx) = (sy / n, sx / n);
                    assert!((cy - (r as f64 + 0.5) * cell).abs() < cell * 0.75, "{:?}", item.facts);
                    assert!((cx - (c as f64 + 0.5) * cell).abs() < cell * 0.75, "{:?}", item.facts);
                }
            }
        }
    }

    #[test]
    fn top_left_prompt_tokens() {
        let s = small_suite();
        let d = make_task(&s.specs[0], Tier::Spatial, 43).unwrap();
        let item = d.train.iter().find(|i| i.facts.cell == (0, 0)).expect("some top-left item");
        assert!(item.prompt.text.contains(&"top".to_string()));
        assert!(item.prompt.text.contains(&"left".to_string()));
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let s = small_suite();
        let a = make_task(&s.specs[1], Tier::Visual, 43).unwrap();
        let b = make_task(&s.specs[1], Tier::Visual, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0].image, a.val[0].image);
        assert_ne!(a.val[0].image, a.test[0].image);
        let c = make_task(&s.specs[1], Tier::Visual, 44).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn families_shift_pixel_statistics() {
        let s = small_suite();
        let means: Vec<[f64; 3]> = s
            .specs
            .iter()
            .map(|spec| {
                let d = make_task(spec, Tier::Basic, 43).unwrap();
                let mut m = [0.0; 3];
                let hw = spec.image_size * spec.image_size;
                for it in &d.train {
                    for (ch, acc) in m.iter_mut().enumerate() {
                        *acc += it.image.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
                    }
                }
                m.map(|v| v / d.train.len() as f64)
            })
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!(dist2(means[i], means[j]).sqrt() > 0.1, "tasks {i} and {j} too similar");
            }
        }
    }

    #[test]
    fn prompt_words_are_consistent_with_render() {
        let s = small_suite();
        let d = make_task(&s.specs[0], Tier::Visual, 43).unwrap();
        for it in &d.train {
            assert_eq!(it.facts.color_word, "pink");
            assert_eq!(it.prompt.text[1], it.facts.color_word);
            assert_eq!(it.prompt.text[0], it.facts.size_word);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = small_suite();
        let mut bad = s.specs[0].clone();
        bad.size_range = (0.9, 0.95);
        assert!(matches!(make_task(&bad, Tier::Basic, 1), Err(crate::Error::Config(_))));
        let mut bad = s.specs[0].clone();
        bad.size_range = (0.2, 0.1);
        assert!(matches!(make_task(&bad, Tier::Basic, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn batch_retiers_prompts() {
        let s = small_suite();
        let d = make_task(&s.specs[0], Tier::Basic, 43).unwrap();
        let vocab = Vocab::builtin(&Lexicon::default());
        let items: Vec<&Sample> = d.train.iter().take(3).collect();
        let b = Batch::new(&items, &d.spec, &vocab, None).unwrap();
        assert_eq!(b.images.shape(), &[3, 3, 32, 32]);
        assert_eq!(b.masks.shape(), &[3, 32, 32]);
        assert!(b.prompts.iter().all(|p| p.len() == 1));
        let m = Batch::new(&items, &d.spec, &vocab, Some(Tier::Medical)).unwrap();
        assert!(m.prompts.iter().all(|p| p.len() == 8));
    }

    #[test]
    fn dump_layout() {
        let s = default_suite_sized(43, 32, (16, 2, 2));
        let d = make_task(&s.specs[3], Tier::Spatial, 43).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_dataset(&d, dir.path()).unwrap();
        let root = dir.path().join("task3_stripe");
        let pbm = fs::read_to_string(root.join("val/0001.pbm")).unwrap();
        assert!(pbm.starts_with("P1\n32 32\n"));
        let pfm = fs::read(root.join("test/0000.pfm")).unwrap();
        assert_eq!(pfm.len(), "PF\n32 32\n-1.0\n".len() + 32 * 32 * 3 * 4);
        let prompts = fs::read_to_string(root.join("train/prompts.txt")).unwrap();
        assert_eq!(prompts.lines().count(), 16);
    }
}
