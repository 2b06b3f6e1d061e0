//! Prompt tiers, lexicons, prompt generation and the weighted complexity score.

use crate::error::{bail, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Weight of a visual-descriptor token in the complexity score.
pub const ALPHA_VISUAL: f64 = 2.0;
/// Weight of a spatial token.
pub const ALPHA_SPATIAL: f64 = 2.5;
/// Weight of a medical token.
pub const ALPHA_MEDICAL: f64 = 3.0;

/// The five prompt tiers, from least to most informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Basic,
    Visual,
    Spatial,
    Medical,
    Comprehensive,
}

impl Tier {
    pub const ALL: [Tier; 5] = [Tier::Basic, Tier::Visual, Tier::Spatial, Tier::Medical, Tier::Comprehensive];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Basic => "basic",
            Tier::Visual => "visual",
            Tier::Spatial => "spatial",
            Tier::Medical => "medical",
            Tier::Comprehensive => "comprehensive",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Tier::ALL.into_iter().find(|t| t.as_str() == s) {
            Some(t) => Ok(t),
            None => bail!(Input, "unknown prompt tier `{s}`"),
        }
    }
}

/// Three disjoint vocabularies of specialised terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub visual: BTreeSet<String>,
    pub spatial: BTreeSet<String>,
    pub medical: BTreeSet<String>,
}

const DEFAULT_VISUAL: &[&str] = &["round", "irregular", "pink", "medium", "small", "large", "shape", "color", "texture"];
const DEFAULT_SPATIAL: &[&str] = &["located", "center", "left", "right", "top", "bottom", "four-chamber", "two-chamber"];
const DEFAULT_MEDICAL: &[&str] = &["polyp", "lesion", "tumor", "lump", "pathology", "malignant", "benign", "tissue"];

impl Default for Lexicon {
    fn default() -> Self {
        let set = |words: &[&str]| words.iter().map(|w| w.to_string()).collect();
        Self { visual: set(DEFAULT_VISUAL), spatial: set(DEFAULT_SPATIAL), medical: set(DEFAULT_MEDICAL) }
    }
}

/// Which lexicon a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Visual,
    Spatial,
    Medical,
}

impl Lexicon {
    pub fn new(visual: BTreeSet<String>, spatial: BTreeSet<String>, medical: BTreeSet<String>) -> Result<Self> {
        let lex = Self { visual, spatial, medical };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("visual", &self.visual), ("spatial", &self.spatial), ("medical", &self.medical)] {
            if set.is_empty() {
                bail!(Input, "lexicon section [{name}] is empty");
            }
        }
        let pairs = [(&self.visual, &self.spatial), (&self.visual, &self.medical), (&self.spatial, &self.medical)];
        for (a, b) in pairs {
            if let Some(w) = a.intersection(b).next() {
                bail!(Input, "lexicon term `{w}` appears in two sections");
            }
        }
        Ok(())
    }

    /// Parses the plain-text format: `[visual]`, `[spatial]` and `[medical]`
    /// section headers, one token per line. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: [BTreeSet<String>; 3] = Default::default();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match header.trim() {
                    "visual" => 0,
                    "spatial" => 1,
                    "medical" => 2,
                    other => bail!(Input, "line {}: unknown lexicon section `{other}`", lineno + 1),
                });
                continue;
            }
            let Some(idx) = current else {
                bail!(Input, "line {}: token `{line}` before any section header", lineno + 1);
            };
            sections[idx].insert(line.to_lowercase());
        }
        let [visual, spatial, medical] = sections;
        Self::new(visual, spatial, medical)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, set) in [("visual", &self.visual), ("spatial", &self.spatial), ("medical", &self.medical)] {
            out.push_str(&format!("[{name}]\n"));
            for w in set {
                out.push_str(w);
                out.push('\n');
            }
        }
        out
    }

    pub fn kind(&self, token: &str) -> Option<TermKind> {
        if self.visual.contains(token) {
            Some(TermKind::Visual)
        } else if self.spatial.contains(token) {
            Some(TermKind::Spatial)
        } else if self.medical.contains(token) {
            Some(TermKind::Medical)
        } else {
            None
        }
    }
}

/// Lowercases, splits on whitespace and strips punctuation except hyphens
/// inside a word.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let kept: String = w
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect();
            let trimmed = kept.trim_matches('-');
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub tier: Tier,
    pub text: Vec<String>,
    pub task_id: usize,
}

impl PromptSpec {
    pub fn sentence(&self) -> String {
        self.text.join(" ")
    }
}

/// Token counts of one prompt: all words, then visual, spatial and medical
/// lexicon hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub words: usize,
    pub visual: usize,
    pub spatial: usize,
    pub medical: usize,
}

impl TermCounts {
    pub fn of(tokens: &[String], lexicon: &Lexicon) -> Self {
        let mut c = TermCounts { words: tokens.len(), visual: 0, spatial: 0, medical: 0 };
        for t in tokens {
            match lexicon.kind(t) {
                Some(TermKind::Visual) => c.visual += 1,
                Some(TermKind::Spatial) => c.spatial += 1,
                Some(TermKind::Medical) => c.medical += 1,
                None => {}
            }
        }
        c
    }

    /// Weighted score of a single prompt. Every token counts once as a word;
    /// specialised tokens additionally contribute their α.
    pub fn score(&self) -> f64 {
        self.words as f64
            + ALPHA_VISUAL * self.visual as f64
            + ALPHA_SPATIAL * self.spatial as f64
            + ALPHA_MEDICAL * self.medical as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityScore {
    pub value: f64,
    pub counts: Vec<TermCounts>,
}

/// Mean weighted score over a prompt set.
pub fn complexity<'a, I>(prompts: I, lexicon: &Lexicon) -> Result<ComplexityScore>
where
    I: IntoIterator<Item = &'a PromptSpec>,
{
    let mut counts = Vec::new();
    for p in prompts {
        if p.text.is_empty() {
            bail!(Input, "prompt with zero tokens in complexity set");
        }
        counts.push(TermCounts::of(&p.text, lexicon));
    }
    if counts.is_empty() {
        bail!(Input, "complexity of an empty prompt set");
    }
    let value = counts.iter().map(TermCounts::score).sum::<f64>() / counts.len() as f64;
    Ok(ComplexityScore { value, counts })
}

/// Convenience for raw strings.
pub fn complexity_of_texts(texts: &[&str], lexicon: &Lexicon) -> Result<ComplexityScore> {
    let specs: Vec<PromptSpec> =
        texts.iter().map(|t| PromptSpec { tier: Tier::Basic, text: tokenize(t), task_id: 0 }).collect();
    complexity(&specs, lexicon)
}

/// Grid row of the 3x3 placement grid.
pub const ROW_WORDS: [&str; 3] = ["top", "center", "bottom"];
/// Grid column of the 3x3 placement grid.
pub const COL_WORDS: [&str; 3] = ["left", "center", "right"];

/// Position phrase for a grid cell: "top left", "center", "bottom", ...
pub fn position_words(row: usize, col: usize) -> Vec<&'static str> {
    match (ROW_WORDS[row], COL_WORDS[col]) {
        ("center", "center") => vec!["center"],
        ("center", c) => vec![c],
        (r, "center") => vec![r],
        (r, c) => vec![r, c],
    }
}

/// What a prompt can say about one rendered object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectFacts {
    pub size_word: String,
    pub color_word: String,
    pub cell: (usize, usize),
}

/// Per-task naming used by the prompt tiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub noun: String,
    pub shape_word: String,
    pub definition: String,
}

/// Subjects of the five built-in tasks, indexed by task id.
pub fn subject_for_task(task_id: usize) -> Result<Subject> {
    let (noun, shape_word, definition) = match task_id {
        0 => ("polyp", "round", "small lump in colon"),
        1 => ("lesion", "round", "abnormal tissue growth on skin"),
        2 => ("tumor", "irregular", "benign mass in breast tissue"),
        3 => ("myocardium", "elongated", "muscle wall of heart"),
        4 => ("melanoma", "irregular", "malignant tumor of skin"),
        _ => bail!(Input, "unknown task id {task_id}"),
    };
    Ok(Subject { noun: noun.into(), shape_word: shape_word.into(), definition: definition.into() })
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Builds the tier-specific prompt for an object.
///
/// basic: `noun`; visual: `size color shape noun`; spatial:
/// `noun located in <position>`; medical: `noun which is a <definition>`;
/// comprehensive: visual attributes, definition and position combined.
pub fn describe(tier: Tier, task_id: usize, subject: &Subject, facts: &ObjectFacts) -> PromptSpec {
    let mut words: Vec<String> = Vec::new();
    let push = |words: &mut Vec<String>, s: &str| words.extend(s.split_whitespace().map(str::to_string));
    let attributes = |words: &mut Vec<String>| {
        push(words, &facts.size_word);
        push(words, &facts.color_word);
        push(words, &subject.shape_word);
    };
    let definition = |words: &mut Vec<String>| {
        push(words, "which is");
        push(words, article(&subject.definition));
        push(words, &subject.definition);
    };
    let location = |words: &mut Vec<String>| {
        push(words, "located in");
        for w in position_words(facts.cell.0, facts.cell.1) {
            push(words, w);
        }
    };
    match tier {
        Tier::Basic => push(&mut words, &subject.noun),
        Tier::Visual => {
            attributes(&mut words);
            push(&mut words, &subject.noun);
        }
        Tier::Spatial => {
            push(&mut words, &subject.noun);
            location(&mut words);
        }
        Tier::Medical => {
            push(&mut words, &subject.noun);
            definition(&mut words);
        }
        Tier::Comprehensive => {
            attributes(&mut words);
            push(&mut words, &subject.noun);
            definition(&mut words);
            location(&mut words);
        }
    }
    PromptSpec { tier, text: words, task_id }
}

pub const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];
pub const COLOR_WORDS: [&str; 9] = ["pink", "red", "brown", "dark", "white", "gray", "yellow", "green", "blue"];

/// Samples object facts uniformly and renders the prompt for `tier`.
pub fn generate_prompt<R: Rng + ?Sized>(tier: Tier, task_id: usize, rng: &mut R) -> Result<PromptSpec> {
    let subject = subject_for_task(task_id)?;
    let facts = ObjectFacts {
        size_word: SIZE_WORDS[rng.random_range(0..SIZE_WORDS.len())].to_string(),
        color_word: COLOR_WORDS[rng.random_range(0..COLOR_WORDS.len())].to_string(),
        cell: (rng.random_range(0..3), rng.random_range(0..3)),
    };
    Ok(describe(tier, task_id, &subject, &facts))
}

/// Fixed word list mapped to embedding ids. Id 0 is reserved for unknown
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Every word the built-in generators and the lexicon can produce.
    pub fn builtin(lexicon: &Lexicon) -> Self {
        let mut set: BTreeSet<String> = BTreeSet::new();
        for t in 0.. {
            let Ok(s) = subject_for_task(t) else { break };
            set.extend(tokenize(&s.noun));
            set.extend(tokenize(&s.shape_word));
            set.extend(tokenize(&s.definition));
        }
        for w in SIZE_WORDS.iter().chain(&COLOR_WORDS).chain(&ROW_WORDS).chain(&COL_WORDS) {
            set.insert(w.to_string());
        }
        for w in ["located", "in", "which", "is", "a", "an"] {
            set.insert(w.to_string());
        }
        set.extend(lexicon.visual.iter().cloned());
        set.extend(lexicon.spatial.iter().cloned());
        set.extend(lexicon.medical.iter().cloned());
        let mut words = vec!["<unk>".to_string()];
        words.extend(set);
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.words[1..].binary_search_by(|w| w.as_str().cmp(token)).map(|i| i + 1).unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Pink round polyp."), toks(&["pink", "round", "polyp"]));
        assert_eq!(tokenize("four-chamber view"), toks(&["four-chamber", "view"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  -dash- , ok!"), toks(&["dash", "ok"]));
    }

    #[test]
    fn complexity_examples() {
        let lex = Lexicon::default();
        assert_eq!(complexity_of_texts(&["polyp"], &lex).unwrap().value, 4.0);
        assert_eq!(complexity_of_texts(&["the image"], &lex).unwrap().value, 2.0);
        let c = complexity_of_texts(&["pink round polyp located in center"], &lex).unwrap();
        assert_eq!(c.value, 18.0);
        assert_eq!(c.counts[0], TermCounts { words: 6, visual: 2, spatial: 2, medical: 1 });
    }

    #[test]
    fn complexity_errors() {
        let lex = Lexicon::default();
        assert!(matches!(complexity(&[], &lex), Err(crate::Error::Input(_))));
        let empty = PromptSpec { tier: Tier::Basic, text: vec![], task_id: 0 };
        assert!(matches!(complexity(&[empty], &lex), Err(crate::Error::Input(_))));
    }

    #[test]
    fn default_lexicon_is_valid() {
        let lex = Lexicon::default();
        lex.validate().unwrap();
        assert_eq!(lex.visual.len(), 9);
        assert_eq!(lex.spatial.len(), 8);
        assert_eq!(lex.medical.len(), 8);
    }

    #[test]
    fn lexicon_text_roundtrip_and_errors() {
        let lex = Lexicon::default();
        assert_eq!(Lexicon::parse(&lex.to_text()).unwrap(), lex);
        assert!(Lexicon::parse("round\n").is_err());
        assert!(Lexicon::parse("[visual]\nround\n[spatial]\nround\n[medical]\nx\n").is_err());
        assert!(Lexicon::parse("[visual]\na\n[spatial]\nb\n").is_err());
        assert!(Lexicon::parse("[colour]\na\n").is_err());
    }

    #[test]
    fn table_rows_for_polyp() {
        let subject = subject_for_task(0).unwrap();
        let facts = ObjectFacts { size_word: "medium".into(), color_word: "pink".into(), cell: (0, 0) };
        let s = |t| describe(t, 0, &subject, &facts).sentence();
        assert_eq!(s(Tier::Basic), "polyp");
        assert_eq!(s(Tier::Visual), "medium pink round polyp");
        assert_eq!(s(Tier::Spatial), "polyp located in top left");
        assert_eq!(s(Tier::Medical), "polyp which is a small lump in colon");
        assert_eq!(
            s(Tier::Comprehensive),
            "medium pink round polyp which is a small lump in colon located in top left"
        );
        let center = ObjectFacts { cell: (1, 1), ..facts };
        assert_eq!(describe(Tier::Spatial, 0, &subject, &center).sentence(), "polyp located in center");
    }

    #[test]
    fn generate_is_seeded_and_checks_task() {
        let a = generate_prompt(Tier::Comprehensive, 2, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        let b = generate_prompt(Tier::Comprehensive, 2, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_prompt(Tier::Basic, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().sentence(), "polyp");
        assert!(generate_prompt(Tier::Basic, 99, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn tier_ordering_holds_for_every_task() {
        let lex = Lexicon::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for task in 0..5 {
            let score = |tier, rng: &mut ChaCha8Rng| {
                let ps: Vec<_> = (0..8).map(|_| generate_prompt(tier, task, rng).unwrap()).collect();
                complexity(&ps, &lex).unwrap().value
            };
            let (b, v, c) = (score(Tier::Basic, &mut rng), score(Tier::Visual, &mut rng), score(Tier::Comprehensive, &mut rng));
            assert!(b < v && v < c, "task {task}: {b} {v} {c}");
        }
    }

    #[test]
    fn vocab_covers_generated_prompts() {
        let lex = Lexicon::default();
        let vocab = Vocab::builtin(&lex);
        assert!(vocab.len() <= crate::model::ModelConfig::default().vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for task in 0..5 {
            for tier in Tier::ALL {
                let p = generate_prompt(tier, task, &mut rng).unwrap();
                assert!(vocab.encode(&p.text).iter().all(|&id| id != 0), "{:?}", p.text);
            }
        }
        assert_eq!(vocab.id("no-such-word"), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            prop::sample::select(vec![
                "polyp", "round", "left", "the", "tissue", "pink", "center", "view", "of", "tumor",
            ])
            .prop_map(str::to_string)
        }

        proptest! {
            #[test]
            fn adding_medical_token_adds_four(words in prop::collection::vec(word(), 1..8)) {
                let lex = Lexicon::default();
                let base = TermCounts::of(&words, &lex).score();
                let mut more = words.clone();
                more.push("lesion".into());
                let raised = TermCounts::of(&more, &lex).score();
                prop_assert_eq!(raised - base, 1.0 + ALPHA_MEDICAL);
            }

            #[test]
            fn permutation_invariant(words in prop::collection::vec(word(), 1..8), other in prop::collection::vec(word(), 1..8)) {
                let lex = Lexicon::default();
                let mk = |w: &Vec<String>| PromptSpec { tier: Tier::Basic, text: w.clone(), task_id: 0 };
                let mut rev = words.clone();
                rev.reverse();
                let a = complexity(&[mk(&words), mk(&other)], &lex).unwrap().value;
                let b = complexity(&[mk(&other), mk(&rev)], &lex).unwrap().value;
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn score_at_least_word_count(words in prop::collection::vec(word(), 1..8)) {
                let c = TermCounts::of(&words, &Lexicon::default());
                prop_assert!(c.score() >= c.words as f64);
            }
        }
    }
}
