//! CSV tables for each figure analog plus `summary.json` with the headline
//! statistics.

use std::collections::BTreeMap;

use anyhow::Result;
use polylens_core::interventions::AblationReport;
use polylens_core::lm::TrainReport;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::PipelineConfig;

pub const OUTPUTS: [&str; 6] = [
    "overlap_csv",
    "ablation_csv",
    "efficacy_csv",
    "selectivity_csv",
    "lang_per_feature_csv",
    "summary",
];

/// Efficacy at least this high, with selectivity at least
/// [`STEER_SELECTIVITY`], counts a language as steered.
pub const STEER_EFFICACY: f64 = 0.5;
pub const STEER_SELECTIVITY: f64 = 0.8;

/// Every upstream artifact the report reads.
pub struct Inputs {
    pub lm_train: TrainReport,
    pub pair_eval: PairEval,
    pub sae_eval: SaeEval,
    pub probes: ProbeStore,
    pub overlap: OverlapStore,
    pub multilingual: MultilingualStore,
    pub ablation: AblationReport,
    pub steering: SteeringStore,
}

impl Inputs {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            lm_train: read_json(&config.path("lm_train"))?,
            pair_eval: read_json(&config.path("pair_eval"))?,
            sae_eval: read_json(&config.path("sae_eval"))?,
            probes: read_json(&config.path("probes"))?,
            overlap: read_json(&config.path("overlap"))?,
            multilingual: read_json(&config.path("multilingual"))?,
            ablation: read_json(&config.path("ablation"))?,
            steering: read_json(&config.path("steering"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub final_epoch_loss: Option<f32>,
    /// Language, then concept.
    pub pair_accuracy: BTreeMap<String, BTreeMap<String, f64>>,
    pub min_pair_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub variant: String,
    pub num_features: usize,
    pub loss_recovered: BTreeMap<String, f64>,
    pub min_loss_recovered: Option<f64>,
    pub max_column_norm_deviation: f64,
    pub decomposition_exact_fraction: f64,
    pub mean_l0: f64,
    pub dead_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// Held-out accuracy keyed by `concept=value@language`.
    pub heldout: BTreeMap<String, f64>,
    pub min_realized_heldout: Option<f64>,
    pub mean_realized_heldout: Option<f64>,
    pub shuffled: BTreeMap<String, f64>,
    pub unrealized: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub k: usize,
    pub num_features: usize,
    pub random_baseline: f64,
    /// Mean off-diagonal IoU per label.
    pub mean_iou: BTreeMap<String, f64>,
    /// Mean over the Number labels.
    pub number_mean_iou: Option<f64>,
    pub number_ratio_to_random: Option<f64>,
    pub concept_overlap_mean: Option<f64>,
    pub concept_overlap_std: Option<f64>,
    pub multilingual_features: BTreeMap<String, usize>,
    pub massive_features: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMeans {
    pub before: f64,
    pub monolingual: f64,
    pub multilingual: f64,
    pub massive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub chance: f64,
    pub rows: usize,
    pub per_concept: BTreeMap<String, AblationMeans>,
    /// Mean over concepts of the per-concept means.
    pub mean: Option<AblationMeans>,
    /// Share of the multilingual-ablation drop that massive ablation
    /// reproduces; undefined when multilingual ablation does not hurt.
    pub massive_recovery: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringBest {
    pub feature: u32,
    pub multiplier: f32,
    pub efficacy: f64,
    pub selectivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub target: String,
    pub per_language: BTreeMap<String, SteeringBest>,
    pub max_efficacy: Option<f64>,
    /// Languages meeting both steering thresholds.
    pub languages_passing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub lm: LmSummary,
    pub sae: SaeSummary,
    pub probes: ProbeSummary,
    pub overlap: OverlapSummary,
    pub ablation: AblationSummary,
    pub steering: SteeringSummary,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn min(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    xs.into_iter().reduce(f64::min)
}

fn probe_key(p: &polylens_core::probes::ProbeParams) -> String {
    format!("{}={}@{}", p.concept, p.value, p.language)
}

fn ablation_summary(report: &AblationReport) -> AblationSummary {
    let mut groups: BTreeMap<String, Vec<AblationMeans>> = BTreeMap::new();
    for r in &report.rows {
        groups.entry(r.concept.clone()).or_default().push(AblationMeans {
            before: r.before,
            monolingual: r.monolingual,
            multilingual: r.multilingual,
            massive: r.massive,
        });
    }
    let avg = |rows: &[AblationMeans]| AblationMeans {
        before: mean(rows.iter().map(|r| r.before)).unwrap_or(0.0),
        monolingual: mean(rows.iter().map(|r| r.monolingual)).unwrap_or(0.0),
        multilingual: mean(rows.iter().map(|r| r.multilingual)).unwrap_or(0.0),
        massive: mean(rows.iter().map(|r| r.massive)).unwrap_or(0.0),
    };
    let per_concept: BTreeMap<String, AblationMeans> = groups.iter().map(|(c, rows)| (c.clone(), avg(rows))).collect();
    let concept_means: Vec<AblationMeans> = per_concept.values().copied().collect();
    let overall = (!concept_means.is_empty()).then(|| avg(&concept_means));
    let massive_recovery = overall.and_then(|m| {
        let drop = m.before - m.multilingual;
        (drop > 0.0).then(|| (m.before - m.massive) / drop)
    });
    AblationSummary {
        chance: report.chance,
        rows: report.rows.len(),
        per_concept,
        mean: overall,
        massive_recovery,
    }
}

pub fn summary(seed: u64, inputs: &Inputs) -> Summary {
    let mut pair_accuracy: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &inputs.pair_eval.results {
        pair_accuracy.entry(r.language.clone()).or_default().insert(r.concept.clone(), r.accuracy);
    }
    let lm = LmSummary {
        final_epoch_loss: inputs.lm_train.epoch_losses.last().copied(),
        min_pair_accuracy: min(inputs.pair_eval.results.iter().map(|r| r.accuracy)),
        pair_accuracy,
    };

    let se = &inputs.sae_eval;
    let loss_recovered: BTreeMap<String, f64> = se.loss_recovered.iter().map(|l| (l.language.clone(), l.loss.fraction)).collect();
    let sae = SaeSummary {
        variant: se.variant.clone(),
        num_features: se.num_features,
        min_loss_recovered: min(loss_recovered.values().copied()),
        loss_recovered,
        max_column_norm_deviation: se.max_column_norm_deviation,
        decomposition_exact_fraction: se.decomposition_exact as f64 / se.decomposition_tokens.max(1) as f64,
        mean_l0: se.mean_l0,
        dead_fraction: se.dead_fraction,
    };

    let ps = &inputs.probes;
    let heldout: BTreeMap<String, f64> = ps.probes.iter().map(|p| (probe_key(p), p.metrics.heldout_accuracy)).collect();
    let control = |kind: ControlKind| -> BTreeMap<String, f64> {
        ps.controls
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| (probe_key(&c.probe), c.probe.metrics.heldout_accuracy))
            .collect()
    };
    let probes = ProbeSummary {
        min_realized_heldout: min(heldout.values().copied()),
        mean_realized_heldout: mean(heldout.values().copied()),
        heldout,
        shuffled: control(ControlKind::Shuffled),
        unrealized: control(ControlKind::Unrealized),
    };

    let ov = &inputs.overlap;
    let ml = &inputs.multilingual;
    let mean_iou: BTreeMap<String, f64> = ov
        .matrices
        .iter()
        .map(|m| (format!("{}={}", m.concept, m.value), m.mean_off_diagonal))
        .collect();
    let number_mean_iou = mean(ov.matrices.iter().filter(|m| m.concept == "Number").map(|m| m.mean_off_diagonal));
    let overlap = OverlapSummary {
        k: ov.k,
        num_features: ov.num_features,
        random_baseline: ov.random_baseline,
        number_ratio_to_random: number_mean_iou.map(|x| x / ov.random_baseline),
        number_mean_iou,
        mean_iou,
        concept_overlap_mean: ml.concept_overlap.as_ref().map(|c| c.mean),
        concept_overlap_std: ml.concept_overlap.as_ref().map(|c| c.std),
        multilingual_features: ml.sets.iter().map(|s| (s.label(), s.multilingual().len())).collect(),
        massive_features: ml.massive.iter().map(|(l, v)| (l.clone(), v.len())).collect(),
    };

    let st = &inputs.steering;
    let per_language: BTreeMap<String, SteeringBest> = st
        .languages
        .iter()
        .map(|l| {
            (
                l.language.clone(),
                SteeringBest {
                    feature: l.best_feature,
                    multiplier: l.best_multiplier,
                    efficacy: l.best_efficacy,
                    selectivity: l.best_selectivity,
                },
            )
        })
        .collect();
    let steering = SteeringSummary {
        target: format!("{}={}", st.concept, st.value),
        max_efficacy: min(per_language.values().map(|b| -b.efficacy)).map(|x| -x),
        languages_passing: per_language
            .iter()
            .filter(|(_, b)| b.efficacy >= STEER_EFFICACY && b.selectivity >= STEER_SELECTIVITY)
            .map(|(l, _)| l.clone())
            .collect(),
        per_language,
    };

    Summary {
        seed,
        lm,
        sae,
        probes,
        overlap,
        ablation: ablation_summary(&inputs.ablation),
        steering,
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Long format: one row per ordered language pair.
pub fn overlap_csv(store: &OverlapStore) -> Result<String> {
    let mut rows = Vec::new();
    for m in &store.matrices {
        for (i, a) in m.languages.iter().enumerate() {
            for (j, b) in m.languages.iter().enumerate() {
                rows.push(vec![m.concept.clone(), m.value.clone(), a.clone(), b.clone(), m.iou[i][j].to_string()]);
            }
        }
    }
    csv_string(&["concept", "value", "language_a", "language_b", "iou"], rows)
}

pub fn ablation_csv(report: &AblationReport) -> Result<String> {
    let rows = report.rows.iter().map(|r| {
        vec![
            r.concept.clone(),
            r.value.clone(),
            r.language.clone(),
            r.examples.to_string(),
            r.before.to_string(),
            r.monolingual.to_string(),
            r.multilingual.to_string(),
            r.massive.to_string(),
            r.n_monolingual.to_string(),
            r.n_multilingual.to_string(),
            r.n_massive.to_string(),
        ]
    });
    csv_string(
        &[
            "concept",
            "value",
            "language",
            "examples",
            "before",
            "monolingual",
            "multilingual",
            "massive",
            "n_monolingual",
            "n_multilingual",
            "n_massive",
        ],
        rows,
    )
}

fn steering_csv(store: &SteeringStore, column: &str, pick: fn(&SteeringRun) -> f64) -> Result<String> {
    let mut rows = Vec::new();
    for l in &store.languages {
        for r in &l.runs {
            rows.push(vec![
                store.concept.clone(),
                store.value.clone(),
                l.language.clone(),
                r.feature.to_string(),
                r.multiplier.to_string(),
                pick(r).to_string(),
                (r.feature == l.best_feature && r.multiplier == l.best_multiplier).to_string(),
            ]);
        }
    }
    csv_string(&["concept", "value", "language", "feature", "multiplier", column, "best"], rows)
}

pub fn efficacy_csv(store: &SteeringStore) -> Result<String> {
    steering_csv(store, "efficacy", |r| r.efficacy)
}

pub fn selectivity_csv(store: &SteeringStore) -> Result<String> {
    steering_csv(store, "selectivity", |r| r.selectivity)
}

pub fn lang_per_feature_csv(store: &MultilingualStore) -> Result<String> {
    let mut rows = Vec::new();
    for (label, hist) in &store.histograms {
        let (concept, value) = label.split_once('=').unwrap_or((label, ""));
        for (langs, count) in hist {
            rows.push(vec![concept.to_owned(), value.to_owned(), langs.to_string(), count.to_string()]);
        }
    }
    csv_string(&["concept", "value", "languages", "features"], rows)
}

pub fn emit(config: &PipelineConfig) -> Result<()> {
    let inputs = Inputs::load(config)?;
    let files = [
        ("overlap_csv", overlap_csv(&inputs.overlap)?),
        ("ablation_csv", ablation_csv(&inputs.ablation)?),
        ("efficacy_csv", efficacy_csv(&inputs.steering)?),
        ("selectivity_csv", selectivity_csv(&inputs.steering)?),
        ("lang_per_feature_csv", lang_per_feature_csv(&inputs.multilingual)?),
    ];
    for (name, body) in files {
        std::fs::write(config.path(name), body)?;
    }
    write_json(&config.path("summary"), &summary(config.seed, &inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use polylens_core::attribution::OverlapMatrix;
    use polylens_core::interventions::AblationRow;

    fn overlap_store(matrices: Vec<OverlapMatrix>) -> OverlapStore {
        OverlapStore {
            k: 32,
            num_features: 512,
            random_baseline: 32.0 / 992.0,
            matrices,
        }
    }

    #[test]
    fn empty_overlap_is_header_only() {
        assert_eq!(overlap_csv(&overlap_store(vec![])).unwrap(), "concept,value,language_a,language_b,iou\n");
    }

    #[test]
    fn overlap_csv_transcribes_matrix() {
        let m = OverlapMatrix {
            concept: "Number".into(),
            value: "Plur".into(),
            languages: vec!["en".into(), "fr".into()],
            iou: vec![vec![1.0, 0.25], vec![0.25, 1.0]],
            mean_off_diagonal: 0.25,
        };
        let text = overlap_csv(&overlap_store(vec![m.clone()])).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for row in rows {
            let i = m.languages.iter().position(|l| l == &row[2]).unwrap();
            let j = m.languages.iter().position(|l| l == &row[3]).unwrap();
            assert_eq!(row[4].parse::<f64>().unwrap(), m.iou[i][j]);
        }
    }

    fn row(concept: &str, before: f64, mono: f64, multi: f64, massive: f64) -> AblationRow {
        AblationRow {
            concept: concept.into(),
            value: "x".into(),
            language: "en".into(),
            examples: 10,
            before,
            monolingual: mono,
            multilingual: multi,
            massive,
            n_monolingual: 1,
            n_multilingual: 1,
            n_massive: 1,
        }
    }

    #[test]
    fn ablation_means_average_concepts_equally() {
        let report = AblationReport {
            rows: vec![
                row("A", 1.0, 0.9, 0.5, 0.6),
                row("A", 1.0, 0.9, 0.7, 0.8),
                row("B", 0.8, 0.8, 0.6, 0.6),
            ],
            chance: 0.5,
        };
        let s = ablation_summary(&report);
        let a = s.per_concept["A"];
        assert!((a.multilingual - 0.6).abs() < 1e-12);
        let m = s.mean.unwrap();
        assert!((m.before - 0.9).abs() < 1e-12);
        assert!((m.multilingual - 0.6).abs() < 1e-12);
        assert!((m.massive - 0.65).abs() < 1e-12);
        // (0.9 - 0.65) / (0.9 - 0.6)
        assert!((s.massive_recovery.unwrap() - 0.25 / 0.3).abs() < 1e-12);
        let flat = ablation_summary(&AblationReport {
            rows: vec![row("A", 0.7, 0.7, 0.8, 0.7)],
            chance: 0.5,
        });
        assert_eq!(flat.massive_recovery, None);
    }
}
