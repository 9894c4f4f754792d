//! Pipeline configuration: one TOML file, every field optional.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polylens_core::lm::{HookScope, LmTrainConfig};
use polylens_core::probes::ProbeConfig;
use polylens_core::sae::{SaeTrainConfig, SaeVariant};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "POLYLENS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Directory that artifact paths are resolved against.
    pub out_dir: PathBuf,
    pub languages: Vec<String>,
    pub concepts: Vec<String>,
    pub threads: usize,
    /// Overrides for individual artifact paths, keyed by artifact name.
    pub paths: BTreeMap<String, PathBuf>,
    pub corpus: CorpusStage,
    pub lm: LmStage,
    pub pairs: PairsStage,
    pub sae: SaeStage,
    pub probes: ProbesStage,
    pub attribution: AttributionStage,
    pub steer: SteerStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            languages: ["en", "fr", "de", "hi", "cy", "tr"].map(String::from).to_vec(),
            concepts: ["Number", "Gender", "Tense", "Polarity"].map(String::from).to_vec(),
            threads: 1,
            paths: BTreeMap::new(),
            corpus: CorpusStage::default(),
            lm: LmStage::default(),
            pairs: PairsStage::default(),
            sae: SaeStage::default(),
            probes: ProbesStage::default(),
            attribution: AttributionStage::default(),
            steer: SteerStage::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusStage {
    pub train_per_language: usize,
    pub eval_per_language: usize,
    pub max_seq_len: usize,
}

impl Default for CorpusStage {
    fn default() -> Self {
        Self {
            train_per_language: 8400,
            eval_per_language: 400,
            max_seq_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmStage {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub hook_layer: usize,
    pub train: LmTrainConfig,
    pub batch_size: usize,
}

impl Default for LmStage {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            hook_layer: 2,
            train: LmTrainConfig::default(),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsStage {
    pub per_concept: usize,
}

impl Default for PairsStage {
    fn default() -> Self {
        Self { per_concept: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeStage {
    pub variant: SaeVariant,
    pub train: SaeTrainConfig,
}

impl Default for SaeStage {
    fn default() -> Self {
        Self {
            variant: SaeVariant::Gated,
            train: SaeTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbesStage {
    pub config: ProbeConfig,
    /// Cap on examples per class before balancing.
    pub max_per_class: usize,
    /// Concept used for the unrealised-concept control probes.
    pub control_concept: String,
    pub control_value: String,
}

impl Default for ProbesStage {
    fn default() -> Self {
        Self {
            config: ProbeConfig::default(),
            max_per_class: 2000,
            control_concept: "Polarity".into(),
            control_value: "Neg".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionStage {
    /// `exact`, `atp` or `ig`.
    pub estimator: String,
    pub ig_steps: usize,
    pub ig_normalize: bool,
    pub k: usize,
    pub max_pairs: usize,
}

impl Default for AttributionStage {
    fn default() -> Self {
        Self {
            estimator: "ig".into(),
            ig_steps: 10,
            ig_normalize: true,
            k: 32,
            max_pairs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerStage {
    pub concept: String,
    pub value: String,
    pub multipliers: Vec<f32>,
    pub max_steps: usize,
    /// Include prompt positions when probing generations.
    pub pool_prompt: bool,
    pub prompts_per_language: usize,
    /// Fixed feature instead of a search over the candidates.
    pub feature: Option<u32>,
    /// Multilingual features of the target tried, most languages first.
    pub candidates: usize,
    pub scope: HookScope,
}

impl Default for SteerStage {
    fn default() -> Self {
        Self {
            concept: "Number".into(),
            value: "Plur".into(),
            multipliers: vec![1.0, 2.0, 4.0, 8.0],
            max_steps: 6,
            pool_prompt: false,
            prompts_per_language: 64,
            feature: None,
            candidates: 8,
            scope: HookScope::Last,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (if given), then applies the seed override from the
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.seed = seed.trim().parse().with_context(|| format!("{SEED_ENV}={seed:?} is not an integer"))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            bail!("no languages configured");
        }
        if self.concepts.is_empty() {
            bail!("no concepts configured");
        }
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if !["exact", "atp", "ig"].contains(&self.attribution.estimator.as_str()) {
            bail!("unknown estimator {:?}", self.attribution.estimator);
        }
        Ok(())
    }

    /// Path of a named artifact.
    pub fn path(&self, name: &str) -> PathBuf {
        match self.paths.get(name) {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out_dir.join(p),
            None => self.out_dir.join(default_file(name)),
        }
    }
}

fn default_file(name: &str) -> String {
    match name {
        "corpus" | "eval_corpus" | "pairs" | "ingested" | "manifest" => format!("{name}.jsonl"),
        "lm" | "sae" => format!("{name}.plns"),
        "acts" | "eval_acts" => format!("{name}.plac"),
        n if n.ends_with("_csv") => format!("{}.csv", &n[..n.len() - 4]),
        n => format!("{n}.json"),
    }
}
