//! Feature ablation and clamping inside the SAE decomposition, probe
//! re-scoring after ablation, and steered greedy generation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::error::{invalid, Result};
use crate::lm::{Batch, HookScope, InterventionHook, LmParams};
use crate::probes::{pool_sum, ProbeParams};
use crate::sae::{recompose, MaxActivationTable, SaeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Ablate,
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub features: Vec<u32>,
    pub mode: InterventionMode,
    pub multiplier: f32,
    pub scope: HookScope,
    pub layer: usize,
}

impl InterventionSpec {
    pub fn ablate(features: Vec<u32>, layer: usize) -> Self {
        Self {
            features,
            mode: InterventionMode::Ablate,
            multiplier: 0.0,
            scope: HookScope::All,
            layer,
        }
    }

    pub fn clamp(feature: u32, multiplier: f32, layer: usize) -> Self {
        Self {
            features: vec![feature],
            mode: InterventionMode::Clamp,
            multiplier,
            scope: HookScope::Last,
            layer,
        }
    }

    fn validate(&self, m: usize, table: Option<&MaxActivationTable>) -> Result<()> {
        if let Some(&bad) = self.features.iter().find(|&&i| i as usize >= m) {
            return Err(invalid(format!("feature {bad} outside 0..{m}")));
        }
        if !self.multiplier.is_finite() {
            return Err(invalid("multiplier must be finite"));
        }
        if self.mode == InterventionMode::Clamp {
            match table {
                None => return Err(invalid("clamping needs a max-activation table")),
                Some(t) if t.max.len() != m => return Err(invalid("max-activation table width differs from the SAE")),
                _ => {}
            }
        }
        Ok(())
    }
}

/// `decode(f') + (x − decode(f))` where `f'` is `f` with the targeted
/// features ablated or clamped.
pub fn reconstruct_with_intervention(sae: &SaeParams, x: &[f32], spec: &InterventionSpec, table: Option<&MaxActivationTable>) -> Result<Vec<f32>> {
    spec.validate(sae.num_features(), table)?;
    let d = sae.decompose(x)?;
    let mut f = d.features;
    for &i in &spec.features {
        f[i as usize] = match spec.mode {
            InterventionMode::Ablate => 0.0,
            InterventionMode::Clamp => spec.multiplier * table.expect("validated").max[i as usize],
        };
    }
    Ok(recompose(&sae.decode_batch(&f)?, &d.error))
}

/// Pooled residual and pooled SAE features of one evaluation sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationExample {
    pub pooled: Vec<f32>,
    /// Sum over tokens of each feature's activation.
    pub features: Vec<f64>,
    pub label: bool,
}

impl AblationExample {
    /// `rows` is `[len × d_model]` at the SAE layer; all rows are real tokens.
    pub fn new(sae: &SaeParams, rows: &[f32], label: bool) -> Result<Self> {
        let n = sae.d_model();
        let mask = vec![true; rows.len() / n.max(1)];
        let pooled = pool_sum(rows, &mask, n)?;
        let feats = sae.encode_batch(rows)?;
        Ok(Self {
            pooled,
            features: crate::probes::pool_features(&feats, &mask, sae.num_features())?,
            label,
        })
    }

    /// Pooled `decode(f_ablated) + ε` over tokens. Decoding is affine, so this
    /// is the pooled residual minus the ablated features' pooled
    /// contribution.
    pub fn ablated(&self, sae: &SaeParams, features: &BTreeSet<u32>) -> Vec<f32> {
        let (n, m) = (sae.d_model(), sae.num_features());
        let w = sae.w_d().data();
        let mut out: Vec<f64> = self.pooled.iter().map(|&v| v as f64).collect();
        for &i in features {
            let a = self.features[i as usize];
            if a != 0.0 {
                for (r, o) in out.iter_mut().enumerate() {
                    *o -= a * w[r * m + i as usize] as f64;
                }
            }
        }
        debug_assert_eq!(out.len(), n);
        out.into_iter().map(|v| v as f32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub concept: String,
    pub value: String,
    pub language: String,
    pub examples: usize,
    pub before: f64,
    pub monolingual: f64,
    pub multilingual: f64,
    pub massive: f64,
    pub n_monolingual: usize,
    pub n_multilingual: usize,
    pub n_massive: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub chance: f64,
}

/// Feature sets compared in the ablation experiment, per concept-value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub monolingual: BTreeSet<u32>,
    pub multilingual: BTreeSet<u32>,
    pub massive: BTreeSet<u32>,
}

fn accuracy_with(probe: &ProbeParams, sae: &SaeParams, examples: &[AblationExample], ablate: &BTreeSet<u32>) -> Result<f64> {
    let mut right = 0;
    for e in examples {
        let x = if ablate.is_empty() { e.pooled.clone() } else { e.ablated(sae, ablate) };
        if probe.predict(&x)? == e.label {
            right += 1;
        }
    }
    Ok(right as f64 / examples.len() as f64)
}

/// Probe accuracy before and after ablating each partition, on the same
/// examples. `examples` is keyed by `(concept=value, language)`.
pub fn probe_ablation_eval(
    probes: &[ProbeParams],
    sae: &SaeParams,
    examples: &BTreeMap<(String, String), Vec<AblationExample>>,
    partitions: &BTreeMap<String, FeaturePartition>,
) -> Result<AblationReport> {
    let m = sae.num_features() as u32;
    let mut rows = Vec::new();
    for probe in probes {
        let label = format!("{}={}", probe.concept, probe.value);
        let Some(part) = partitions.get(&label) else { continue };
        for set in [&part.monolingual, &part.multilingual, &part.massive] {
            if let Some(&bad) = set.iter().find(|&&i| i >= m) {
                return Err(invalid(format!("partition for {label} references unknown feature {bad}")));
            }
        }
        let Some(ex) = examples.get(&(label.clone(), probe.language.clone())) else { continue };
        if ex.is_empty() {
            continue;
        }
        rows.push(AblationRow {
            concept: probe.concept.clone(),
            value: probe.value.clone(),
            language: probe.language.clone(),
            examples: ex.len(),
            before: accuracy_with(probe, sae, ex, &BTreeSet::new())?,
            monolingual: accuracy_with(probe, sae, ex, &part.monolingual)?,
            multilingual: accuracy_with(probe, sae, ex, &part.multilingual)?,
            massive: accuracy_with(probe, sae, ex, &part.massive)?,
            n_monolingual: part.monolingual.len(),
            n_multilingual: part.multilingual.len(),
            n_massive: part.massive.len(),
        });
    }
    Ok(AblationReport { rows, chance: 0.5 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    pub language: String,
    pub prompt: Vec<u32>,
    pub baseline: Vec<u32>,
    pub steered: Vec<u32>,
    /// Probe predictions keyed by `concept=value`.
    pub baseline_labels: BTreeMap<String, bool>,
    pub steered_labels: BTreeMap<String, bool>,
    /// Some token repeated more than 20 times in a row.
    pub degenerate: bool,
}

fn degenerate(tokens: &[u32]) -> bool {
    let mut run = 0;
    for (i, t) in tokens.iter().enumerate() {
        run = if i > 0 && tokens[i - 1] == *t { run + 1 } else { 1 };
        if run > 20 {
            return true;
        }
    }
    false
}

/// Probe predictions on a clean forward pass over `prompt + generated`,
/// pooling the generated positions only unless `pool_prompt` is set.
pub fn probe_generation(
    lm: &LmParams,
    layer: usize,
    probes: &[&ProbeParams],
    prompt: &[u32],
    generated: &[u32],
    pool_prompt: bool,
) -> Result<BTreeMap<String, bool>> {
    let mut ids = prompt.to_vec();
    ids.extend(generated);
    let ids = &ids[..ids.len().min(lm.config.max_seq_len)];
    let trace = lm.forward_batch(&Batch::new(&[ids])?, None)?;
    let d = lm.config.d_model;
    let start = if pool_prompt || generated.is_empty() { 0 } else { prompt.len().min(ids.len() - 1) };
    let rows = &trace.rows(layer, 0)[start * d..];
    let pooled = pool_sum(rows, &vec![true; rows.len() / d], d)?;
    probes
        .iter()
        .map(|p| Ok((format!("{}={}", p.concept, p.value), p.predict(&pooled)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    pub max_steps: usize,
    pub pool_prompt: bool,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            pool_prompt: false,
        }
    }
}

/// Unsteered generation for one prompt and its probe labels. Shared by every
/// intervention tried on that prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub labels: BTreeMap<String, bool>,
}

pub fn baseline_generation(lm: &LmParams, layer: usize, probes: &[&ProbeParams], prompt: &[u32], config: &SteerConfig) -> Result<Baseline> {
    let generated = lm.greedy(prompt, config.max_steps, None)?;
    Ok(Baseline {
        prompt: prompt.to_vec(),
        labels: probe_generation(lm, layer, probes, prompt, &generated, config.pool_prompt)?,
        generated,
    })
}

/// Greedy generation with the intervention applied at the hook layer on
/// every step, compared with a precomputed baseline from the same layer.
#[allow(clippy::too_many_arguments)]
pub fn steer_from_baseline(
    lm: &LmParams,
    sae: &SaeParams,
    spec: &InterventionSpec,
    table: Option<&MaxActivationTable>,
    probes: &[&ProbeParams],
    language: &str,
    baseline: &Baseline,
    config: &SteerConfig,
) -> Result<SteeringResult> {
    spec.validate(sae.num_features(), table)?;
    let transform = |x: &[f32]| reconstruct_with_intervention(sae, x, spec, table).expect("spec validated");
    let hook = InterventionHook {
        layer: spec.layer,
        scope: spec.scope,
        transform: &transform,
    };
    let steered = lm.greedy(&baseline.prompt, config.max_steps, Some(&hook))?;
    Ok(SteeringResult {
        language: language.to_owned(),
        prompt: baseline.prompt.clone(),
        baseline_labels: baseline.labels.clone(),
        steered_labels: probe_generation(lm, spec.layer, probes, &baseline.prompt, &steered, config.pool_prompt)?,
        degenerate: degenerate(&baseline.generated) || degenerate(&steered),
        baseline: baseline.generated.clone(),
        steered,
    })
}

/// Greedy generation with and without the intervention, then clean-pass
/// probe labels for both.
#[allow(clippy::too_many_arguments)]
pub fn steer_generate(
    lm: &LmParams,
    sae: &SaeParams,
    spec: &InterventionSpec,
    table: Option<&MaxActivationTable>,
    probes: &[&ProbeParams],
    language: &str,
    prompt: &[u32],
    config: &SteerConfig,
) -> Result<SteeringResult> {
    spec.validate(sae.num_features(), table)?;
    let baseline = baseline_generation(lm, spec.layer, probes, prompt, config)?;
    steer_from_baseline(lm, sae, spec, table, probes, language, &baseline, config)
}

/// Whether generation stopped at EOS.
pub fn finished(tokens: &[u32]) -> bool {
    tokens.last() == Some(&EOS)
}

/// Fraction of results whose target-probe label differs between baseline
/// and steered generations.
pub fn efficacy(results: &[SteeringResult], target: &str) -> Result<f64> {
    if results.is_empty() {
        return Err(invalid("no steering results"));
    }
    let mut flips = 0;
    for r in results {
        let (Some(a), Some(b)) = (r.baseline_labels.get(target), r.steered_labels.get(target)) else {
            return Err(invalid(format!("no {target} probe label in a steering result")));
        };
        if a != b {
            flips += 1;
        }
    }
    Ok(flips as f64 / results.len() as f64)
}

/// Fraction of results where no probe of a concept other than
/// `target_concept` changes its label.
pub fn selectivity(results: &[SteeringResult], target_concept: &str) -> Result<f64> {
    if results.is_empty() {
        return Err(invalid("no steering results"));
    }
    let prefix = format!("{target_concept}=");
    let mut kept = 0;
    for r in results {
        let others: Vec<&String> = r.baseline_labels.keys().filter(|k| !k.starts_with(&prefix)).collect();
        if others.is_empty() {
            return Err(invalid("selectivity needs probes for at least two concepts"));
        }
        if others.iter().all(|k| r.baseline_labels.get(*k) == r.steered_labels.get(*k)) {
            kept += 1;
        }
    }
    Ok(kept as f64 / results.len() as f64)
}
