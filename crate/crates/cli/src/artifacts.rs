//! JSON shapes of the files stages exchange.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use polylens_core::attribution::{ConceptOverlap, FeatureRanking, MultilingualFeatureSet, OverlapMatrix};
use polylens_core::interventions::SteeringResult;
use polylens_core::probes::ProbeParams;
use polylens_core::sae::LossRecovered;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::MissingArtifact;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|_| MissingArtifact(path.to_owned()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("{} does not match the expected schema", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub language: String,
    pub concept: String,
    pub pairs: usize,
    pub accuracy: f64,
    /// Pairs the model gets right on both sides, written to the pairs file.
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub results: Vec<PairAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageLossRecovered {
    pub language: String,
    pub sentences: usize,
    #[serde(flatten)]
    pub loss: LossRecovered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEval {
    pub variant: String,
    pub num_features: usize,
    pub loss_recovered: Vec<LanguageLossRecovered>,
    pub max_column_norm_deviation: f64,
    /// Tokens on which `decode(f) + error` reproduced the input exactly.
    pub decomposition_exact: usize,
    pub decomposition_tokens: usize,
    pub mean_l0: f64,
    pub dead_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    /// Labels permuted within the language.
    Shuffled,
    /// Labels of a concept the language does not mark, taken from a
    /// parallel sentence in a language that does.
    Unrealized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlProbe {
    pub kind: ControlKind,
    pub probe: ProbeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStore {
    pub layer: usize,
    pub probes: Vec<ProbeParams>,
    pub controls: Vec<ControlProbe>,
    /// Labels skipped for lack of examples, as `concept=value@language`.
    pub skipped: Vec<String>,
}

impl ProbeStore {
    pub fn find(&self, label: &str, language: &str) -> Option<&ProbeParams> {
        self.probes.iter().find(|p| p.language == language && format!("{}={}", p.concept, p.value) == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingStore {
    pub k: usize,
    pub num_features: usize,
    pub rankings: Vec<FeatureRanking>,
}

impl RankingStore {
    pub fn find(&self, label: &str, language: &str) -> Option<&FeatureRanking> {
        self.rankings.iter().find(|r| r.language == language && r.label() == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStore {
    pub k: usize,
    pub num_features: usize,
    /// Expected IoU of two independent uniformly random k-subsets.
    pub random_baseline: f64,
    pub matrices: Vec<OverlapMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilingualStore {
    pub sets: Vec<MultilingualFeatureSet>,
    /// Upper-quartile massively multilingual features per label.
    pub massive: BTreeMap<String, Vec<u32>>,
    pub histograms: BTreeMap<String, BTreeMap<usize, usize>>,
    pub concept_overlap: Option<ConceptOverlap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringRun {
    pub feature: u32,
    pub multiplier: f32,
    pub efficacy: f64,
    pub selectivity: f64,
    pub degenerate: usize,
    /// Kept for the best run of each language only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<SteeringResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSteering {
    pub language: String,
    pub candidates: Vec<u32>,
    pub prompts: usize,
    pub runs: Vec<SteeringRun>,
    pub best_feature: u32,
    pub best_multiplier: f32,
    pub best_efficacy: f64,
    pub best_selectivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringStore {
    pub concept: String,
    pub value: String,
    pub scope: String,
    pub pool_prompt: bool,
    pub languages: Vec<LanguageSteering>,
}
