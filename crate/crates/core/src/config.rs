//! The TOML file that drives every pipeline stage, with dotted-key overrides.

use crate::classifiers::{CoherenceClassifierConfig, PretrainConfig, StyleClassifierConfig};
use crate::corpus::SyntheticConfig;
use crate::error::{CastError, Result};
use crate::eval::LanguageModelConfig;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    pub min_frequency: usize,
    /// Negatives drawn per paragraph for the coherence classifier.
    pub negatives_per_positive: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: SyntheticConfig::default(), min_frequency: 1, negatives_per_positive: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleStage {
    pub classifier: StyleClassifierConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceStage {
    pub classifier: CoherenceClassifierConfig,
    pub pretrain: PretrainConfig,
}

impl Default for CoherenceStage {
    fn default() -> Self {
        CoherenceStage {
            classifier: CoherenceClassifierConfig::default(),
            pretrain: PretrainConfig { epochs: 12, batch_size: 16, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanguageModelStage {
    pub model: LanguageModelConfig,
    pub pretrain: PretrainConfig,
}

/// Everything a run needs besides its input files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub style: StyleStage,
    pub coherence: CoherenceStage,
    pub language_model: LanguageModelStage,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

/// Per-stage seeds, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub data: u64,
    pub coherence_pairs: u64,
    pub style: u64,
    pub coherence: u64,
    pub language_model: u64,
    pub model_init: u64,
    pub training: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if self.data.min_frequency == 0 || self.data.negatives_per_positive == 0 {
            return Err(CastError::Config("data.min_frequency and data.negatives_per_positive must be at least 1".into()));
        }
        self.style.classifier.validate()?;
        self.style.pretrain.validate()?;
        self.coherence.classifier.validate()?;
        self.coherence.pretrain.validate()?;
        self.language_model.model.validate()?;
        self.language_model.pretrain.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.training.generation.max_len > self.model.max_sentence_len {
            return Err(CastError::Config("training.generation.max_len exceeds model.max_sentence_len".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = self.seed;
        StageSeeds {
            data: s,
            coherence_pairs: s.wrapping_add(1),
            style: s.wrapping_add(2),
            coherence: s.wrapping_add(3),
            language_model: s.wrapping_add(4),
            model_init: s.wrapping_add(5),
            training: s.wrapping_add(6),
        }
    }

    /// Parses TOML text, applies `KEY=VALUE` overrides with dotted keys, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CastError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: PipelineConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CastError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CastError::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            CastError::Config(m) => CastError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// `{"seed": .., "config": ..}`, embedded in every artifact.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({ "seed": self.seed, "config": self })
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value
/// is read as a TOML value and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| CastError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CastError::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CastError::Config(format!("override {key}: {p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.training.batch_size, 64);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = "seed = 3\n[training]\nmax_steps = 10\n";
        let o = ["training.max_steps=20", "training.weights.style = 0.5", "training.switches.use_context_encoder=false", "seed=9"];
        let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
        let c = PipelineConfig::from_toml_str(text, &o).unwrap();
        assert_eq!((c.seed, c.training.max_steps), (9, 20));
        assert_eq!(c.training.weights.style, 0.5);
        assert!(!c.training.switches.use_context_encoder);
        let c = PipelineConfig::from_toml_str("", &["training.selection=bleu".to_string()]).unwrap();
        assert_eq!(c.training.selection, crate::training::SelectionMetric::Bleu);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for (text, o) in
            [("seed = 1\n", "nokey"), ("", "training.unknown=1"), ("", "training.batch_size=7"), ("", "seed.x=1"), ("", ".a=1")]
        {
            let r = PipelineConfig::from_toml_str(text, &[o.to_string()]);
            assert!(matches!(r, Err(CastError::Config(_))), "{o}: {r:?}");
        }
        assert!(PipelineConfig::from_toml_str("[training\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig { seed: 42, training: TrainingConfig { max_steps: 17, ..Default::default() }, ..Default::default() };
        let back = PipelineConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
