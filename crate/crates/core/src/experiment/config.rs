//! TOML experiment configuration.

use crate::model::ModelConfig;
use crate::synth::{default_suite_sized, Suite, TierPlan, ORDER_NAMES};
use crate::trainer::{Method, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Overrides `output_dir` when set.
pub const OUTPUT_ENV: &str = "PAEWC_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 256, n_val: 64, n_test: 64 }
    }
}

/// One grid of runs: every method × order × tier plan × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub orders: Vec<String>,
    #[serde(default = "default_tiers")]
    pub prompt_tiers: Vec<TierPlan>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_tiers() -> Vec<TierPlan> {
    vec![TierPlan::Uniform(crate::prompts::Tier::Comprehensive)]
}

/// A configuration problem, pointing at the offending line when known.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

/// 1-based line containing byte offset `at`.
fn line_at(text: &str, at: usize) -> usize {
    text[..at].matches('\n').count() + 1
}

/// 1-based line on which `key` is assigned or opens a table.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('=')) || t == format!("[{key}]")
    })
    .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        if let Some(trainer) = raw.get("trainer").and_then(|t| t.as_table()) {
            for key in ["method", "seed"] {
                if trainer.contains_key(key) {
                    return Err(ConfigError {
                        line: line_of(text, key),
                        message: format!("`trainer.{key}` is set by the grid (`methods` / `seeds`), not the trainer table"),
                    });
                }
            }
        }
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let err = |key: &str, message: String| ConfigError { line: line_of(text, key), message };
        for (key, empty) in [
            ("methods", self.methods.is_empty()),
            ("orders", self.orders.is_empty()),
            ("prompt_tiers", self.prompt_tiers.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(err(key, format!("`{key}` must not be empty")));
            }
        }
        if let Some(bad) = self.orders.iter().find(|o| !ORDER_NAMES.contains(&o.as_str())) {
            return Err(err("orders", format!("unknown order `{bad}`; expected one of {}", ORDER_NAMES.join(", "))));
        }
        self.model.validate().map_err(|e| err("model", e.to_string()))?;
        self.trainer.validate().map_err(|e| err("trainer", e.to_string()))?;
        let d = &self.data;
        if d.n_train < crate::synth::PROBE_SIZE || d.n_val == 0 || d.n_test == 0 {
            return Err(err("data", format!("data splits too small: {d:?} (train needs at least {})", crate::synth::PROBE_SIZE)));
        }
        if d.n_train < self.trainer.stability_batches * self.trainer.batch_size {
            return Err(err("data", "n_train cannot fill the stability minibatches".into()));
        }
        Ok(())
    }

    /// `output_dir`, unless the override variable is set.
    pub fn resolved_output(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn suite(&self, seed: u64) -> Suite {
        default_suite_sized(seed, self.model.image_size, (self.data.n_train, self.data.n_val, self.data.n_test))
    }

    /// Every grid cell in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for order in &self.orders {
                for &tiers in &self.prompt_tiers {
                    for &method in &self.methods {
                        out.push(Cell { method, order: order.clone(), tiers, seed });
                    }
                }
            }
        }
        out
    }
}

/// One run of the grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub order: String,
    pub tiers: TierPlan,
    pub seed: u64,
}

impl Cell {
    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        format!("{}__{}__{}__s{}", self.method, self.order, self.tiers.name(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
methods = ["sequential", "pa_ewc"]
orders = ["order_A"]
seeds = [43]
output_dir = "out"
"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.methods, [Method::Sequential, Method::PaEwc]);
        assert_eq!(c.trainer, TrainerConfig::default());
        assert_eq!(c.cells().len(), 2);
        assert_eq!(c.cells()[1].id(), "pa_ewc__order_A__comprehensive__s43");
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = format!("{MINIMAL}\n[trainer]\nepochs = 3\n");
        let e = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(e.line, Some(8), "{e}");
        assert!(e.message.contains("epochs"), "{e}");
    }

    #[test]
    fn bad_values_point_at_their_line() {
        let e = ExperimentConfig::parse(&MINIMAL.replace("order_A", "order_Z")).unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = ExperimentConfig::parse(&MINIMAL.replace("\"pa_ewc\"", "\"ewc\"")).unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
        let e = ExperimentConfig::parse(&MINIMAL.replace("[43]", "[]")).unwrap_err();
        assert_eq!(e.line, Some(4));
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[trainer]\nseed = 1\n")).unwrap_err();
        assert_eq!(e.line, Some(7), "{e}");
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[model]\nembed_dim = 33\n")).unwrap_err();
        assert_eq!(e.line, Some(6), "{e}");
        assert!(e.to_string().starts_with("line 6: "));
    }

    #[test]
    fn tiers_and_sections_parse() {
        let text = format!("{MINIMAL}prompt_tiers = [\"basic\", \"adaptive\"]\n[trainer]\nepochs_per_task = 2\n[data]\nn_train = 128\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.prompt_tiers, [TierPlan::Uniform(crate::prompts::Tier::Basic), TierPlan::TaskAdaptive]);
        assert_eq!(c.trainer.epochs_per_task, 2);
        assert_eq!(c.data.n_train, 128);
        assert_eq!(c.cells().len(), 4);
    }
}
