//! Per-feature indirect effects (exact patching, attribution patching,
//! integrated gradients), top-k rankings and cross-lingual overlap.
//!
//! Metrics are functions of sum-pooled feature activations, so patching a
//! feature at every token position of a sentence is the same as replacing
//! its pooled coordinate.

use std::collections::{BTreeMap, BTreeSet};

use polylens_nn::{ScalarFn, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::probes::{pool_features, FeatureMetric, ProbeParams};
use crate::sae::SaeParams;

pub const TOP_K: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Estimator {
    Exact,
    Atp,
    Ig { steps: usize, normalize: bool },
}

impl Estimator {
    pub fn ig(steps: usize) -> Self {
        Self::Ig { steps, normalize: true }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Atp => "atp",
            Self::Ig { .. } => "ig",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub feature: u32,
    pub effect: f64,
    pub estimator: String,
    pub count: usize,
}

/// Value and gradient of a metric at `a`, on an `f64` tape.
pub fn metric_grad<M: ScalarFn>(m: &M, a: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::<f64>::new();
    let v = tape.values([a.len()], a.to_vec(), true)?;
    let out = m.eval(&tape, v)?;
    if out.len() != 1 {
        return Err(invalid("metric must be scalar"));
    }
    let grad = tape.backward(out, None)?.wrt(v).unwrap_or_else(|| vec![0.0; a.len()]);
    if !out.item().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(invalid("non-finite metric gradient"));
    }
    Ok((out.item(), grad))
}

pub fn metric_value<M: ScalarFn>(m: &M, a: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let v = tape.values([a.len()], a.to_vec(), false)?;
    Ok(m.eval(&tape, v)?.item())
}

fn check_pair(clean: &[f64], patch: &[f64]) -> Result<()> {
    if clean.len() != patch.len() {
        return Err(invalid(format!("clean has {} features, patch has {}", clean.len(), patch.len())));
    }
    Ok(())
}

/// `m(clean with coordinate i from patch) − m(clean)`.
pub fn exact_ie<M: ScalarFn>(m: &M, clean: &[f64], patch: &[f64], i: usize) -> Result<f64> {
    check_pair(clean, patch)?;
    if i >= clean.len() {
        return Err(invalid(format!("feature {i} outside 0..{}", clean.len())));
    }
    let mut patched = clean.to_vec();
    patched[i] = patch[i];
    Ok(metric_value(m, &patched)? - metric_value(m, clean)?)
}

/// Exact effects for every feature; only coordinates that differ need a
/// forward pass.
pub fn exact_all<M: ScalarFn>(m: &M, clean: &[f64], patch: &[f64]) -> Result<Vec<f64>> {
    check_pair(clean, patch)?;
    let base = metric_value(m, clean)?;
    let mut out = vec![0.0; clean.len()];
    let mut patched = clean.to_vec();
    for i in 0..clean.len() {
        if clean[i] != patch[i] {
            patched[i] = patch[i];
            out[i] = metric_value(m, &patched)? - base;
            patched[i] = clean[i];
        }
    }
    Ok(out)
}

/// `∇m(clean) ⊙ (patch − clean)`: one backward pass for all features.
pub fn atp<M: ScalarFn>(m: &M, clean: &[f64], patch: &[f64]) -> Result<Vec<f64>> {
    check_pair(clean, patch)?;
    let (_, g) = metric_grad(m, clean)?;
    Ok(g.iter().zip(clean.iter().zip(patch)).map(|(g, (c, p))| g * (p - c)).collect())
}

/// Gradients averaged over `α·clean + (1−α)·patch` for `α = 0, 1/K, …,
/// (K−1)/K`, times `patch − clean`. Without `normalize` the sum is not
/// divided by `K`.
pub fn ig_attribution<M: ScalarFn>(m: &M, clean: &[f64], patch: &[f64], steps: usize, normalize: bool) -> Result<Vec<f64>> {
    check_pair(clean, patch)?;
    if steps == 0 {
        return Err(invalid("integrated gradients needs at least one step"));
    }
    let mut total = vec![0.0f64; clean.len()];
    for j in 0..steps {
        let alpha = j as f64 / steps as f64;
        let point: Vec<f64> = clean.iter().zip(patch).map(|(c, p)| alpha * c + (1.0 - alpha) * p).collect();
        let (_, g) = metric_grad(m, &point)?;
        total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
    }
    let scale = if normalize { 1.0 / steps as f64 } else { 1.0 };
    Ok(total.iter().zip(clean.iter().zip(patch)).map(|(t, (c, p))| t * scale * (p - c)).collect())
}

pub fn estimate<M: ScalarFn>(m: &M, clean: &[f64], patch: &[f64], estimator: Estimator) -> Result<Vec<f64>> {
    match estimator {
        Estimator::Exact => exact_all(m, clean, patch),
        Estimator::Atp => atp(m, clean, patch),
        Estimator::Ig { steps, normalize } => ig_attribution(m, clean, patch, steps, normalize),
    }
}

/// Per-token SAE features and error terms of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    /// `[len × m]`.
    pub feats: Vec<f32>,
    /// `[len × n]`, `x − x̂`.
    pub errors: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SentenceRecord {
    /// Decomposes residual rows `[len × n]`.
    pub fn from_residuals(sae: &SaeParams, rows: &[f32], mask: Vec<bool>) -> Result<Self> {
        let feats = sae.encode_batch(rows)?;
        let x_hat = sae.decode_batch(&feats)?;
        let errors = rows.iter().zip(&x_hat).map(|(&a, &b)| a as f64 - b as f64).collect();
        Ok(Self { feats, errors, mask })
    }

    pub fn pooled(&self, m: usize) -> Result<Vec<f64>> {
        pool_features(&self.feats, &self.mask, m)
    }
}

/// Clean and patch sentences for one probe, with opposite labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub id: u64,
    pub clean: SentenceRecord,
    pub patch: SentenceRecord,
}

impl PatchPair {
    /// Effects of patching each feature on the probe logit of the clean
    /// sentence.
    pub fn effects(&self, probe: &ProbeParams, sae: &SaeParams, estimator: Estimator) -> Result<Vec<f64>> {
        let m = sae.num_features();
        let metric = FeatureMetric::new(probe, sae, &self.clean.feats, &self.clean.errors, &self.clean.mask)?;
        estimate(&metric, &self.clean.pooled(m)?, &self.patch.pooled(m)?, estimator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub id: u32,
    pub mean_abs_effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub concept: String,
    pub value: String,
    pub language: String,
    pub estimator: String,
    pub pairs: usize,
    /// Top features, descending by mean |effect|, ties by ascending id.
    pub features: Vec<RankedFeature>,
}

impl FeatureRanking {
    pub fn ids(&self) -> BTreeSet<u32> {
        self.features.iter().map(|f| f.id).collect()
    }

    pub fn label(&self) -> String {
        format!("{}={}", self.concept, self.value)
    }
}

/// Mean absolute effect per feature across pairs, cut to the top `k`.
pub fn rank_effects(effects: &[Vec<f64>], k: usize) -> Result<Vec<RankedFeature>> {
    let Some(first) = effects.first() else {
        return Err(invalid("no attribution pairs"));
    };
    let m = first.len();
    if effects.iter().any(|e| e.len() != m) {
        return Err(invalid("effect vectors of different widths"));
    }
    let mut mean = vec![0.0f64; m];
    for e in effects {
        for (a, v) in mean.iter_mut().zip(e) {
            if !v.is_finite() {
                return Err(invalid("non-finite effect"));
            }
            *a += v.abs();
        }
    }
    let mut ranked: Vec<RankedFeature> = mean
        .into_iter()
        .enumerate()
        .map(|(i, s)| RankedFeature {
            id: i as u32,
            mean_abs_effect: s / effects.len() as f64,
        })
        .collect();
    ranked.sort_by(|a, b| b.mean_abs_effect.total_cmp(&a.mean_abs_effect).then(a.id.cmp(&b.id)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Ranks features for one probe from its patch pairs (at least 10).
pub fn rank_features(pairs: &[PatchPair], probe: &ProbeParams, sae: &SaeParams, estimator: Estimator, k: usize) -> Result<FeatureRanking> {
    if pairs.len() < 10 {
        return Err(invalid(format!("{} patch pairs, need at least 10", pairs.len())));
    }
    let mut sorted: Vec<&PatchPair> = pairs.iter().collect();
    sorted.sort_by_key(|p| p.id);
    let effects = sorted.iter().map(|p| p.effects(probe, sae, estimator)).collect::<Result<Vec<_>>>()?;
    Ok(FeatureRanking {
        concept: probe.concept.clone(),
        value: probe.value.clone(),
        language: probe.language.clone(),
        estimator: estimator.tag().to_owned(),
        pairs: pairs.len(),
        features: rank_effects(&effects, k)?,
    })
}

pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub concept: String,
    pub value: String,
    pub languages: Vec<String>,
    pub iou: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

/// Pairwise IoU of top-k sets for one concept-value across languages.
pub fn iou_overlap(rankings: &[FeatureRanking]) -> Result<OverlapMatrix> {
    if rankings.len() < 2 {
        return Err(invalid("overlap needs at least two languages"));
    }
    let (concept, value) = (&rankings[0].concept, &rankings[0].value);
    if rankings.iter().any(|r| &r.concept != concept || &r.value != value) {
        return Err(invalid("rankings for different concept-values"));
    }
    if let Some(r) = rankings.iter().find(|r| r.features.is_empty()) {
        return Err(invalid(format!("ranking for {} has k = 0", r.language)));
    }
    let sets: Vec<BTreeSet<u32>> = rankings.iter().map(FeatureRanking::ids).collect();
    let n = sets.len();
    let mut grid = vec![vec![1.0; n]; n];
    let mut off = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = iou(&sets[i], &sets[j]);
            grid[i][j] = v;
            grid[j][i] = v;
            off += 2.0 * v;
        }
    }
    Ok(OverlapMatrix {
        concept: concept.clone(),
        value: value.clone(),
        languages: rankings.iter().map(|r| r.language.clone()).collect(),
        iou: grid,
        mean_off_diagonal: off / (n * (n - 1)) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLanguages {
    pub languages: BTreeSet<String>,
    /// Mean over those languages of the feature's mean |effect|.
    pub mean_abs_effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilingualFeatureSet {
    pub concept: String,
    pub value: String,
    pub features: BTreeMap<u32, FeatureLanguages>,
}

impl MultilingualFeatureSet {
    pub fn label(&self) -> String {
        format!("{}={}", self.concept, self.value)
    }

    /// Features in the top-k set of two or more languages.
    pub fn multilingual(&self) -> BTreeSet<u32> {
        self.features.iter().filter(|(_, f)| f.languages.len() >= 2).map(|(&i, _)| i).collect()
    }

    /// Features in the top-k set of exactly one language.
    pub fn monolingual(&self) -> BTreeSet<u32> {
        self.features.iter().filter(|(_, f)| f.languages.len() == 1).map(|(&i, _)| i).collect()
    }
}

pub fn multilingual_features(rankings: &[FeatureRanking]) -> Result<MultilingualFeatureSet> {
    if rankings.len() < 2 {
        return Err(invalid("multilingual analysis needs at least two languages"));
    }
    let (concept, value) = (&rankings[0].concept, &rankings[0].value);
    if rankings.iter().any(|r| &r.concept != concept || &r.value != value) {
        return Err(invalid("rankings for different concept-values"));
    }
    let mut acc: BTreeMap<u32, (BTreeSet<String>, f64)> = BTreeMap::new();
    for r in rankings {
        for f in &r.features {
            let e = acc.entry(f.id).or_default();
            e.0.insert(r.language.clone());
            e.1 += f.mean_abs_effect;
        }
    }
    Ok(MultilingualFeatureSet {
        concept: concept.clone(),
        value: value.clone(),
        features: acc
            .into_iter()
            .map(|(id, (languages, sum))| {
                let mean_abs_effect = sum / languages.len() as f64;
                (id, FeatureLanguages { languages, mean_abs_effect })
            })
            .collect(),
    })
}

/// Upper quartile of the multilingual features ordered by language count,
/// then mean |effect|, then id. If no feature is multilingual the whole set
/// is ranked instead.
pub fn massively_multilingual(set: &MultilingualFeatureSet) -> Result<Vec<u32>> {
    if set.features.is_empty() {
        return Err(invalid(format!("empty feature set for {}", set.label())));
    }
    let multi = set.multilingual();
    let mut pool: Vec<(&u32, &FeatureLanguages)> = if multi.is_empty() {
        set.features.iter().collect()
    } else {
        set.features.iter().filter(|(i, _)| multi.contains(i)).collect()
    };
    pool.sort_by(|a, b| {
        b.1.languages
            .len()
            .cmp(&a.1.languages.len())
            .then(b.1.mean_abs_effect.total_cmp(&a.1.mean_abs_effect))
            .then(a.0.cmp(b.0))
    });
    let keep = pool.len().div_ceil(4);
    Ok(pool.into_iter().take(keep).map(|(&i, _)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptPairOverlap {
    pub a: String,
    pub b: String,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptOverlap {
    pub pairs: Vec<ConceptPairOverlap>,
    pub mean: f64,
    /// Population standard deviation over pairs.
    pub std: f64,
}

/// IoU of multilingual feature sets for every unordered concept-value pair.
pub fn concept_pair_overlap(sets: &[MultilingualFeatureSet]) -> Result<ConceptOverlap> {
    if sets.len() < 2 {
        return Err(invalid("need at least two concept-values"));
    }
    let multi: Vec<BTreeSet<u32>> = sets.iter().map(MultilingualFeatureSet::multilingual).collect();
    if let Some(i) = multi.iter().position(BTreeSet::is_empty) {
        return Err(invalid(format!("no multilingual features for {}", sets[i].label())));
    }
    let mut pairs = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            pairs.push(ConceptPairOverlap {
                a: sets[i].label(),
                b: sets[j].label(),
                overlap: iou(&multi[i], &multi[j]),
            });
        }
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.overlap).sum::<f64>() / n;
    let std = (pairs.iter().map(|p| (p.overlap - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ConceptOverlap { pairs, mean, std })
}

/// Number of features by how many languages they are top-k in.
pub fn languages_per_feature_histogram(set: &MultilingualFeatureSet) -> Result<BTreeMap<usize, usize>> {
    if set.features.is_empty() {
        return Err(invalid(format!("empty feature set for {}", set.label())));
    }
    let mut h = BTreeMap::new();
    for f in set.features.values() {
        *h.entry(f.languages.len()).or_insert(0) += 1;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use polylens_nn::{Element, Var};

    struct Square;

    impl ScalarFn for Square {
        fn eval<'t, S: Element>(&self, _: &'t Tape<S>, a: Var<'t, S>) -> polylens_nn::Result<Var<'t, S>> {
            Ok(a.mul(a)?.sum())
        }
    }

    fn affine() -> FeatureMetric {
        FeatureMetric {
            w_eff: vec![0.5, -2.0],
            offset: 0.25,
        }
    }

    #[test]
    fn exact_cases() {
        let m = affine();
        assert_eq!(exact_ie(&m, &[1.0, 2.0], &[1.0, 2.0], 0).unwrap(), 0.0);
        // hand: feature 1 moves from 2 to 0.5 → −2·(−1.5) = 3
        assert_eq!(exact_ie(&m, &[1.0, 2.0], &[4.0, 0.5], 1).unwrap(), 3.0);
        assert_eq!(exact_ie(&m, &[1.0, 2.0], &[4.0, 0.5], 0).unwrap(), 1.5);
        assert!(exact_ie(&m, &[1.0, 2.0], &[4.0, 0.5], 2).is_err());
    }

    #[test]
    fn square_metric_closed_forms() {
        let atp_v = atp(&Square, &[1.0], &[3.0]).unwrap()[0];
        let ig10 = ig_attribution(&Square, &[1.0], &[3.0], 10, true).unwrap()[0];
        let exact = exact_ie(&Square, &[1.0], &[3.0], 0).unwrap();
        // ∇ = 2a; left-Riemann mean of 2(3 − 2α) over α = j/10 is 4.2, times Δ = 2
        let oracle_ig = (0..10).map(|j| 2.0 * (3.0 - 2.0 * j as f64 / 10.0)).sum::<f64>() / 10.0 * 2.0;
        assert_eq!(atp_v, 4.0);
        assert!((ig10 - 8.4).abs() < 1e-12 && (ig10 - oracle_ig).abs() < 1e-12);
        assert_eq!(exact, 8.0);
        // K = 1 is the gradient at the patch point
        assert_eq!(ig_attribution(&Square, &[1.0], &[3.0], 1, true).unwrap()[0], 12.0);
        let raw = ig_attribution(&Square, &[1.0], &[3.0], 10, false).unwrap()[0];
        assert!((raw - 84.0).abs() < 1e-9);
        assert!(ig_attribution(&Square, &[1.0], &[3.0], 0, true).is_err());
    }

    #[test]
    fn identical_inputs_give_zero_everywhere() {
        let a = [0.3, 1.7];
        assert_eq!(atp(&Square, &a, &a).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ig_attribution(&Square, &a, &a, 10, true).unwrap(), vec![0.0, 0.0]);
        assert_eq!(exact_all(&Square, &a, &a).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_estimators_agree() {
        let m = affine();
        let (c, p) = ([1.0, 2.0], [-0.5, 3.5]);
        let e = exact_all(&m, &c, &p).unwrap();
        assert_eq!(atp(&m, &c, &p).unwrap(), e);
        for k in [1, 3, 10] {
            let ig = ig_attribution(&m, &c, &p, k, true).unwrap();
            for (a, b) in ig.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ranking_rules() {
        let r = rank_effects(&[vec![0.0, 0.5, -2.0, 0.5]], 3).unwrap();
        let ids: Vec<u32> = r.iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![2, 1, 3]);
        let r = rank_effects(&[vec![0.0; 5]], 3).unwrap();
        assert_eq!(r.iter().map(|f| f.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(rank_effects(&[vec![1.0; 5]], 99).unwrap().len(), 5);
        assert!(rank_effects(&[], 3).is_err());
        // signs cancel in a plain mean but not in the mean of |effect|
        let r = rank_effects(&[vec![1.0, 0.6], vec![-1.0, 0.6]], 1).unwrap();
        assert_eq!(r[0].id, 0);
    }

    fn ranking(lang: &str, ids: &[u32]) -> FeatureRanking {
        FeatureRanking {
            concept: "Number".into(),
            value: "Plur".into(),
            language: lang.into(),
            estimator: "atp".into(),
            pairs: 10,
            features: ids.iter().enumerate().map(|(r, &id)| RankedFeature { id, mean_abs_effect: 10.0 - r as f64 }).collect(),
        }
    }

    #[test]
    fn iou_cases() {
        let m = iou_overlap(&[ranking("en", &[1, 2, 3, 4]), ranking("fr", &[3, 4, 5, 6]), ranking("de", &[1, 2, 3, 4])]).unwrap();
        assert!((m.iou[0][1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.iou[0][2], 1.0);
        assert_eq!(m.iou[1][0], m.iou[0][1]);
        assert!((0..3).all(|i| m.iou[i][i] == 1.0));
        let d = iou_overlap(&[ranking("en", &[1, 2]), ranking("fr", &[3, 4])]).unwrap();
        assert_eq!(d.iou[0][1], 0.0);
        assert!(iou_overlap(&[ranking("en", &[1])]).is_err());
        assert!(iou_overlap(&[ranking("en", &[1]), ranking("fr", &[])]).is_err());
    }

    #[test]
    fn multilingual_partition_and_massive() {
        let rs = [ranking("en", &[1, 2, 3, 4]), ranking("fr", &[1, 2, 3]), ranking("de", &[1, 2]), ranking("hi", &[1])];
        let set = multilingual_features(&rs).unwrap();
        assert_eq!(set.features[&1].languages.len(), 4);
        assert_eq!(set.monolingual(), BTreeSet::from([4]));
        assert_eq!(set.multilingual(), BTreeSet::from([1, 2, 3]));
        // ⌈3/4⌉ = 1
        assert_eq!(massively_multilingual(&set).unwrap(), vec![1]);
        let h = languages_per_feature_histogram(&set).unwrap();
        assert_eq!(h, BTreeMap::from([(1, 1), (2, 1), (3, 1), (4, 1)]));
        let single = multilingual_features(&[ranking("en", &[7]), ranking("fr", &[])]).unwrap();
        assert_eq!(massively_multilingual(&single).unwrap(), vec![7]);
    }

    #[test]
    fn concept_overlap_cases() {
        let a = multilingual_features(&[ranking("en", &[1, 2]), ranking("fr", &[1, 2])]).unwrap();
        let mut b = a.clone();
        b.value = "Sing".into();
        let o = concept_pair_overlap(&[a.clone(), b]).unwrap();
        assert_eq!(o.mean, 1.0);
        let mut c = multilingual_features(&[ranking("en", &[5, 6]), ranking("fr", &[5, 6])]).unwrap();
        c.value = "Sing".into();
        assert_eq!(concept_pair_overlap(&[a.clone(), c]).unwrap().mean, 0.0);
        let empty = multilingual_features(&[ranking("en", &[5]), ranking("fr", &[6])]).unwrap();
        assert!(concept_pair_overlap(&[a, empty]).is_err());
    }
}
