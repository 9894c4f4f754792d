//! Stage implementations. Each stage reads its upstream artifacts from the
//! paths in the config, writes its outputs, and records both in the manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use polylens_core::attribution::{
    concept_pair_overlap, iou_overlap, languages_per_feature_histogram, massively_multilingual, multilingual_features,
    rank_features, Estimator, FeatureRanking, PatchPair, SentenceRecord,
};
use polylens_core::corpus::{
    generate_corpus, make_minimal_pairs, parse_conllu, read_jsonl, spec_for, write_jsonl, AnnotatedSentence, ConceptLabel,
    MiniLanguageSpec, MinimalPair, Vocabulary,
};
use polylens_core::interventions::{
    baseline_generation, efficacy, probe_ablation_eval, selectivity, steer_from_baseline, AblationExample, AblationReport, FeaturePartition,
    InterventionSpec, SteerConfig,
};
use polylens_core::lm::{extract_activations, pair_outcomes, train_lm, ActivationCache, Batch, LmParams, TransformerConfig};
use polylens_core::probes::{pool_sum, train_probe, PooledExample, ProbeParams, MIN_PER_CLASS};
use polylens_core::sae::{
    column_norms, loss_recovered, max_feature_activations, recompose, train_sae, MaxActivationTable, SaeParams,
};
use polylens_nn::rng::{derive_seed, stream};
use rand::seq::SliceRandom;

use crate::artifacts::*;
use crate::config::PipelineConfig;
use crate::error::MissingArtifact;
use crate::manifest::{hash_artifact, Manifest, ManifestEntry};
use crate::report;

/// Stages in pipeline order, as run by `all`.
pub const STAGES: [&str; 14] = [
    "gen-corpus",
    "train-lm",
    "eval-pairs",
    "extract-acts",
    "train-sae",
    "eval-sae",
    "profile-max-acts",
    "train-probes",
    "attribute",
    "overlap",
    "rank-multilingual",
    "ablate",
    "steer",
    "report",
];

type Artifacts = Vec<(&'static str, PathBuf)>;

fn named(config: &PipelineConfig, names: &[&'static str]) -> Artifacts {
    names.iter().map(|&n| (n, config.path(n))).collect()
}

/// Inputs and outputs of a stage.
pub fn stage_io(name: &str, config: &PipelineConfig) -> Result<(Artifacts, Artifacts)> {
    let (inputs, outputs): (&[&'static str], &[&'static str]) = match name {
        "gen-corpus" => (&[], &["corpus", "eval_corpus", "vocab"]),
        "train-lm" => (&["corpus", "vocab"], &["lm", "lm_train"]),
        "eval-pairs" => (&["lm", "vocab"], &["pairs", "pair_eval"]),
        "extract-acts" => (&["lm", "vocab", "corpus", "eval_corpus"], &["acts", "eval_acts"]),
        "train-sae" => (&["acts"], &["sae", "sae_train"]),
        "eval-sae" => (&["lm", "vocab", "sae", "eval_corpus", "eval_acts"], &["sae_eval"]),
        "profile-max-acts" => (&["sae", "acts"], &["max_acts"]),
        "train-probes" => (&["acts", "corpus"], &["probes"]),
        "attribute" => (&["lm", "vocab", "sae", "pairs", "probes"], &["rankings"]),
        "overlap" => (&["rankings"], &["overlap"]),
        "rank-multilingual" => (&["rankings"], &["multilingual"]),
        "ablate" => (&["sae", "eval_acts", "eval_corpus", "probes", "multilingual"], &["ablation"]),
        "steer" => (&["lm", "vocab", "sae", "max_acts", "probes", "multilingual", "pairs"], &["steering"]),
        "report" => (
            &["lm_train", "pair_eval", "sae_eval", "probes", "overlap", "multilingual", "ablation", "steering"],
            &report::OUTPUTS,
        ),
        other => bail!("unknown stage {other:?}"),
    };
    Ok((named(config, inputs), named(config, outputs)))
}

fn stage_params(name: &str, config: &PipelineConfig) -> Result<serde_json::Value> {
    let v = match name {
        "gen-corpus" => serde_json::to_value((&config.languages, &config.corpus))?,
        "train-lm" => serde_json::to_value(&config.lm)?,
        "eval-pairs" => serde_json::to_value((&config.concepts, &config.pairs))?,
        "extract-acts" => serde_json::json!({ "layer": config.lm.hook_layer, "batch_size": config.lm.batch_size }),
        "train-sae" | "eval-sae" | "profile-max-acts" => serde_json::to_value(&config.sae)?,
        "train-probes" | "ablate" => serde_json::to_value(&config.probes)?,
        "attribute" | "overlap" | "rank-multilingual" => serde_json::to_value(&config.attribution)?,
        "steer" => serde_json::to_value(&config.steer)?,
        _ => serde_json::Value::Null,
    };
    Ok(v)
}

/// Runs one stage and appends its manifest entry.
pub fn run_stage(name: &str, config: &PipelineConfig) -> Result<ManifestEntry> {
    let (inputs, outputs) = stage_io(name, config)?;
    let run = |config: &PipelineConfig| match name {
        "gen-corpus" => gen_corpus(config),
        "train-lm" => train_lm_stage(config),
        "eval-pairs" => eval_pairs(config),
        "extract-acts" => extract_acts(config),
        "train-sae" => train_sae_stage(config),
        "eval-sae" => eval_sae(config),
        "profile-max-acts" => profile_max_acts(config),
        "train-probes" => train_probes(config),
        "attribute" => attribute(config),
        "overlap" => overlap(config),
        "rank-multilingual" => rank_multilingual(config),
        "ablate" => ablate(config),
        "steer" => steer(config),
        "report" => report::emit(config),
        _ => unreachable!("checked by stage_io"),
    };
    execute(name, config, inputs, outputs, stage_params(name, config)?, run)
}

fn execute(
    name: &str,
    config: &PipelineConfig,
    inputs: Artifacts,
    outputs: Artifacts,
    params: serde_json::Value,
    run: impl FnOnce(&PipelineConfig) -> Result<()>,
) -> Result<ManifestEntry> {
    let mut manifest = Manifest::open(&config.path("manifest"))?;
    let input_hashes = manifest.verify_inputs(&inputs)?;
    std::fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    let start = Instant::now();
    run(config).with_context(|| format!("stage {name} failed"))?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let output_hashes = outputs
        .iter()
        .map(|(n, p)| hash_artifact(n, p).with_context(|| format!("stage {name} did not write {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let entry = ManifestEntry {
        stage: name.to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: config.seed,
        params,
        inputs: input_hashes,
        outputs: output_hashes,
        wall_time_s,
    };
    manifest.append(entry.clone())?;
    Ok(entry)
}

/// Parses a CoNLL-U file into the `ingested` artifact.
pub fn ingest_conllu(config: &PipelineConfig, input: &Path, language: &str) -> Result<ManifestEntry> {
    let inputs = vec![("conllu", input.to_owned())];
    let outputs = named(config, &["ingested"]);
    let params = serde_json::json!({ "language": language });
    let out = config.path("ingested");
    execute("ingest-conllu", config, inputs, outputs, params, |_| {
        let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
        let sentences = parse_conllu(&text, language).with_context(|| format!("parsing {}", input.display()))?;
        save_jsonl(&out, &sentences)
    })
}

fn seed_for(config: &PipelineConfig, label: &str) -> u64 {
    derive_seed(config.seed, label)
}

fn specs(config: &PipelineConfig) -> Result<Vec<MiniLanguageSpec>> {
    config
        .languages
        .iter()
        .map(|l| spec_for(l).ok_or_else(|| anyhow!("no grammar for language {l:?}")))
        .collect()
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|_| MissingArtifact(path.to_owned()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn save_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(write_jsonl(std::io::BufWriter::new(f), items)?)
}

fn load_vocab(config: &PipelineConfig) -> Result<Vocabulary> {
    read_json(&config.path("vocab"))
}

fn load_lm(config: &PipelineConfig) -> Result<LmParams> {
    let p = config.path("lm");
    LmParams::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_sae(config: &PipelineConfig) -> Result<SaeParams> {
    let p = config.path("sae");
    SaeParams::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_cache(config: &PipelineConfig, name: &str) -> Result<ActivationCache> {
    let p = config.path(name);
    ActivationCache::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn gen_corpus(config: &PipelineConfig) -> Result<()> {
    let specs = specs(config)?;
    let train = generate_corpus(&specs, config.corpus.train_per_language, seed_for(config, "train-corpus"))?;
    let eval = generate_corpus(&specs, config.corpus.eval_per_language, seed_for(config, "eval-corpus"))?;
    let vocab = Vocabulary::from_specs(&specs);
    for s in train.iter().chain(&eval) {
        let n = vocab.encode_unpadded(&s.forms()).len();
        if n > config.corpus.max_seq_len {
            bail!("{} sentence {} needs {n} positions, above max_seq_len {}", s.language, s.id, config.corpus.max_seq_len);
        }
    }
    save_jsonl(&config.path("corpus"), &train)?;
    save_jsonl(&config.path("eval_corpus"), &eval)?;
    write_json(&config.path("vocab"), &vocab)
}

fn encode_all(vocab: &Vocabulary, sentences: &[AnnotatedSentence]) -> Vec<Vec<u32>> {
    sentences.iter().map(|s| vocab.encode_unpadded(&s.forms())).collect()
}

fn train_lm_stage(config: &PipelineConfig) -> Result<()> {
    let vocab = load_vocab(config)?;
    let corpus: Vec<AnnotatedSentence> = load_jsonl(&config.path("corpus"))?;
    let lm = &config.lm;
    let tc = TransformerConfig {
        d_model: lm.d_model,
        n_layers: lm.n_layers,
        n_heads: lm.n_heads,
        d_ff: lm.d_ff,
        hook_layer: lm.hook_layer,
        ..TransformerConfig::new(vocab.len(), config.corpus.max_seq_len)
    };
    tc.validate()?;
    let (params, report) = train_lm(tc, &encode_all(&vocab, &corpus), &lm.train, seed_for(config, "train-lm"))?;
    params.save(config.path("lm"))?;
    write_json(&config.path("lm_train"), &report)
}

fn eval_pairs(config: &PipelineConfig) -> Result<()> {
    let lm = load_lm(config)?;
    let vocab = load_vocab(config)?;
    let mut kept = Vec::new();
    let mut results = Vec::new();
    for spec in specs(config)? {
        for concept in config.concepts.iter().filter(|c| spec.realizes(c)) {
            let seed = seed_for(config, &format!("pairs/{}/{concept}", spec.language));
            let pairs = make_minimal_pairs(&spec, concept, config.pairs.per_concept, seed)?;
            let outcomes = pair_outcomes(&lm, &vocab, &pairs)?;
            let before = kept.len();
            kept.extend(pairs.iter().zip(&outcomes).filter(|(_, o)| o.both()).map(|(p, _)| p.clone()));
            let right = kept.len() - before;
            results.push(PairAccuracy {
                language: spec.language.clone(),
                concept: concept.clone(),
                pairs: pairs.len(),
                accuracy: right as f64 / pairs.len() as f64,
                kept: right,
            });
        }
    }
    save_jsonl(&config.path("pairs"), &kept)?;
    write_json(&config.path("pair_eval"), &PairEval { results })
}

/// Extraction split over threads at batch boundaries, so every batch, and
/// therefore every activation, is the same for any thread count.
fn extract_parallel(
    lm: &LmParams,
    vocab: &Vocabulary,
    sentences: &[AnnotatedSentence],
    layer: usize,
    batch_size: usize,
    threads: usize,
) -> Result<ActivationCache> {
    let batches = sentences.len().div_ceil(batch_size);
    let per_thread = batches.div_ceil(threads.max(1)).max(1) * batch_size;
    if threads <= 1 || sentences.len() <= per_thread {
        return Ok(extract_activations(lm, vocab, sentences, layer, batch_size)?);
    }
    let parts: Vec<polylens_core::Result<ActivationCache>> = std::thread::scope(|s| {
        let handles: Vec<_> = sentences
            .chunks(per_thread)
            .map(|chunk| s.spawn(move || extract_activations(lm, vocab, chunk, layer, batch_size)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("extraction thread panicked")).collect()
    });
    let mut records = Vec::with_capacity(sentences.len());
    for p in parts {
        records.extend(p?.records);
    }
    Ok(ActivationCache {
        d_model: lm.config.d_model,
        layer,
        records,
    })
}

fn extract_acts(config: &PipelineConfig) -> Result<()> {
    let lm = load_lm(config)?;
    let vocab = load_vocab(config)?;
    for (src, dst) in [("corpus", "acts"), ("eval_corpus", "eval_acts")] {
        let sentences: Vec<AnnotatedSentence> = load_jsonl(&config.path(src))?;
        let cache = extract_parallel(&lm, &vocab, &sentences, config.lm.hook_layer, config.lm.batch_size, config.threads)?;
        cache.save(config.path(dst))?;
    }
    Ok(())
}

fn train_sae_stage(config: &PipelineConfig) -> Result<()> {
    let cache = load_cache(config, "acts")?;
    let tokens = cache.token_matrix();
    let (sae, report) = train_sae(&config.sae.train, &tokens, config.sae.variant, seed_for(config, "train-sae"))?;
    sae.save(config.path("sae"))?;
    write_json(&config.path("sae_train"), &report)
}

fn eval_sae(config: &PipelineConfig) -> Result<()> {
    let lm = load_lm(config)?;
    let vocab = load_vocab(config)?;
    let sae = load_sae(config)?;
    let eval: Vec<AnnotatedSentence> = load_jsonl(&config.path("eval_corpus"))?;
    let cache = load_cache(config, "eval_acts")?;
    let layer = cache.layer;
    let mut per_language = Vec::new();
    for language in &config.languages {
        let mine: Vec<AnnotatedSentence> = eval.iter().filter(|s| &s.language == language).cloned().collect();
        if mine.is_empty() {
            continue;
        }
        let loss = loss_recovered(&lm, &sae, &encode_all(&vocab, &mine), layer, config.lm.batch_size)?;
        per_language.push(LanguageLossRecovered {
            language: language.clone(),
            sentences: mine.len(),
            loss,
        });
    }
    let m = sae.num_features();
    let n = sae.d_model();
    let (mut exact, mut total, mut active) = (0usize, 0usize, 0usize);
    let mut fired = vec![false; m];
    for rec in &cache.records {
        let rows = rec.acts.data();
        let feats = sae.encode_batch(rows)?;
        let x_hat = sae.decode_batch(&feats)?;
        for t in 0..rec.len() {
            let x = &rows[t * n..(t + 1) * n];
            let xh = &x_hat[t * n..(t + 1) * n];
            let err: Vec<f64> = x.iter().zip(xh).map(|(&a, &b)| a as f64 - b as f64).collect();
            exact += usize::from(recompose(xh, &err) == x);
            total += 1;
            for (j, &f) in feats[t * m..(t + 1) * m].iter().enumerate() {
                if f > 0.0 {
                    active += 1;
                    fired[j] = true;
                }
            }
        }
    }
    let max_dev = column_norms(sae.w_d()).iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);
    let report = SaeEval {
        variant: format!("{:?}", sae.variant()).to_lowercase(),
        num_features: m,
        loss_recovered: per_language,
        max_column_norm_deviation: max_dev,
        decomposition_exact: exact,
        decomposition_tokens: total,
        mean_l0: active as f64 / total.max(1) as f64,
        dead_fraction: fired.iter().filter(|f| !**f).count() as f64 / m as f64,
    };
    write_json(&config.path("sae_eval"), &report)
}

fn profile_max_acts(config: &PipelineConfig) -> Result<()> {
    let sae = load_sae(config)?;
    let cache = load_cache(config, "acts")?;
    write_json(&config.path("max_acts"), &max_feature_activations(&sae, &cache)?)
}

/// Positives carry `label`. Negatives lack it, drawn from sentences that
/// mark the concept when there are enough of those. Each class is shuffled
/// and capped at `cap`.
fn select<'a, T>(items: &'a [(&AnnotatedSentence, T)], label: &ConceptLabel, cap: usize, seed: u64) -> (Vec<&'a T>, Vec<&'a T>) {
    let mut pos: Vec<&T> = items.iter().filter(|(s, _)| s.has(label)).map(|(_, t)| t).collect();
    let mut neg: Vec<&T> = items
        .iter()
        .filter(|(s, _)| !s.has(label) && s.has_concept(&label.concept))
        .map(|(_, t)| t)
        .collect();
    if neg.len() < MIN_PER_CLASS {
        neg = items.iter().filter(|(s, _)| !s.has(label)).map(|(_, t)| t).collect();
    }
    let mut rng = stream(seed, "select");
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(cap);
    neg.truncate(cap);
    (pos, neg)
}

fn pooled_examples(pos: &[&Vec<f32>], neg: &[&Vec<f32>]) -> Vec<PooledExample> {
    pos.iter()
        .map(|p| (p, true))
        .chain(neg.iter().map(|p| (p, false)))
        .map(|(p, label)| PooledExample {
            pooled: (*p).clone(),
            label,
        })
        .collect()
}

/// Values of `concept` observed in a language's sentences.
fn observed_values(sentences: &[&AnnotatedSentence], concept: &str) -> BTreeSet<String> {
    sentences
        .iter()
        .flat_map(|s| s.tokens.iter().filter_map(|t| t.value_of(concept)))
        .map(str::to_owned)
        .collect()
}

fn train_probes(config: &PipelineConfig) -> Result<()> {
    let cache = load_cache(config, "acts")?;
    let corpus: Vec<AnnotatedSentence> = load_jsonl(&config.path("corpus"))?;
    let by_key: HashMap<(&str, u64), &AnnotatedSentence> = corpus.iter().map(|s| ((s.language.as_str(), s.id), s)).collect();
    let d = cache.d_model;
    let mut items: BTreeMap<&str, Vec<(&AnnotatedSentence, Vec<f32>)>> = BTreeMap::new();
    for rec in &cache.records {
        let s = by_key
            .get(&(rec.language.as_str(), rec.id))
            .ok_or_else(|| anyhow!("activation record {}/{} has no corpus sentence", rec.language, rec.id))?;
        items.entry(s.language.as_str()).or_default().push((s, pool_sum(rec.acts.data(), &rec.mask, d)?));
    }
    let pc = &config.probes;
    let mut probes = Vec::new();
    let mut controls = Vec::new();
    let mut skipped = Vec::new();
    let all_specs = specs(config)?;
    for spec in &all_specs {
        let lang = spec.language.as_str();
        let Some(mine) = items.get(lang) else { continue };
        let sentences: Vec<&AnnotatedSentence> = mine.iter().map(|(s, _)| *s).collect();
        let mut first_examples = None;
        for concept in config.concepts.iter().filter(|c| spec.realizes(c)) {
            for value in observed_values(&sentences, concept) {
                let label = ConceptLabel::new(concept.clone(), value)?;
                let seed = seed_for(config, &format!("probe/{label}@{lang}"));
                let (pos, neg) = select(mine, &label, pc.max_per_class, seed);
                if pos.len() < MIN_PER_CLASS || neg.len() < MIN_PER_CLASS {
                    skipped.push(format!("{label}@{lang}"));
                    continue;
                }
                let examples = pooled_examples(&pos, &neg);
                probes.push(train_probe(&label, lang, &examples, &pc.config, seed)?);
                first_examples.get_or_insert((label, examples));
            }
        }
        if let Some((label, mut examples)) = first_examples {
            let seed = seed_for(config, &format!("shuffled/{label}@{lang}"));
            let mut labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
            labels.shuffle(&mut stream(seed, "labels"));
            for (e, l) in examples.iter_mut().zip(labels) {
                e.label = l;
            }
            controls.push(ControlProbe {
                kind: ControlKind::Shuffled,
                probe: train_probe(&label, lang, &examples, &pc.config, seed)?,
            });
        }
        if !spec.realizes(&pc.control_concept) {
            let label = ConceptLabel::new(pc.control_concept.clone(), pc.control_value.clone())?;
            let Some(source) = all_specs.iter().find(|s| s.realizes(&label.concept)) else { continue };
            // borrow the label from the parallel sentence, keep this language's activations
            let relabelled: Vec<(&AnnotatedSentence, Vec<f32>)> = mine
                .iter()
                .filter_map(|(s, p)| by_key.get(&(source.language.as_str(), s.id)).map(|src| (*src, p.clone())))
                .collect();
            let seed = seed_for(config, &format!("unrealized/{label}@{lang}"));
            let (pos, neg) = select(&relabelled, &label, pc.max_per_class, seed);
            if pos.len() < MIN_PER_CLASS || neg.len() < MIN_PER_CLASS {
                skipped.push(format!("{label}@{lang} (control)"));
                continue;
            }
            controls.push(ControlProbe {
                kind: ControlKind::Unrealized,
                probe: train_probe(&label, lang, &pooled_examples(&pos, &neg), &pc.config, seed)?,
            });
        }
    }
    let store = ProbeStore {
        layer: cache.layer,
        probes,
        controls,
        skipped,
    };
    write_json(&config.path("probes"), &store)
}

fn estimator(config: &PipelineConfig) -> Estimator {
    let a = &config.attribution;
    match a.estimator.as_str() {
        "exact" => Estimator::Exact,
        "atp" => Estimator::Atp,
        _ => Estimator::Ig {
            steps: a.ig_steps,
            normalize: a.ig_normalize,
        },
    }
}

/// BOS + pieces of `words`, no EOS.
fn prompt_ids(vocab: &Vocabulary, words: &[String]) -> Vec<u32> {
    let mut ids = vocab.encode_unpadded(words);
    ids.pop();
    ids
}

/// Pairs grouped by `(language, concept)` in file order.
fn group_pairs(pairs: &[MinimalPair]) -> BTreeMap<(String, String), Vec<&MinimalPair>> {
    let mut groups: BTreeMap<(String, String), Vec<&MinimalPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry((p.language.clone(), p.concept().to_owned())).or_default().push(p);
    }
    groups
}

fn sentence_records(lm: &LmParams, sae: &SaeParams, seqs: &[Vec<u32>], layer: usize, batch_size: usize) -> Result<Vec<SentenceRecord>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk)?;
        let trace = lm.forward_batch(&batch, None)?;
        for (b, &len) in batch.lens.iter().enumerate() {
            out.push(SentenceRecord::from_residuals(sae, trace.rows(layer, b), vec![true; len])?);
        }
    }
    Ok(out)
}

fn attribute(config: &PipelineConfig) -> Result<()> {
    let lm = load_lm(config)?;
    let vocab = load_vocab(config)?;
    let sae = load_sae(config)?;
    let pairs: Vec<MinimalPair> = load_jsonl(&config.path("pairs"))?;
    let store: ProbeStore = read_json(&config.path("probes"))?;
    let est = estimator(config);
    let k = config.attribution.k;
    let mut rankings = Vec::new();
    for ((lang, _), group) in group_pairs(&pairs) {
        let group = &group[..group.len().min(config.attribution.max_pairs)];
        let mut seqs = Vec::with_capacity(2 * group.len());
        for p in group {
            for side in 0..2 {
                let mut words = p.prefixes[side].clone();
                words.push(p.continuations[side].clone());
                seqs.push(prompt_ids(&vocab, &words));
            }
        }
        let records = sentence_records(&lm, &sae, &seqs, store.layer, config.lm.batch_size)?;
        let labels: BTreeSet<String> = group.iter().flat_map(|p| p.labels.iter().map(|l| l.to_string())).collect();
        for label in labels {
            let Some(probe) = store.find(&label, &lang) else { continue };
            let patch_pairs: Vec<PatchPair> = group
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let side = p.labels.iter().position(|l| l.to_string() == label)?;
                    Some(PatchPair {
                        id: i as u64,
                        clean: records[2 * i + 1 - side].clone(),
                        patch: records[2 * i + side].clone(),
                    })
                })
                .collect();
            if patch_pairs.len() < 10 {
                continue;
            }
            rankings.push(rank_features(&patch_pairs, probe, &sae, est, k)?);
        }
    }
    rankings.sort_by(|a, b| (a.label(), &a.language).cmp(&(b.label(), &b.language)));
    let out = RankingStore {
        k,
        num_features: sae.num_features(),
        rankings,
    };
    write_json(&config.path("rankings"), &out)
}

fn by_label(rankings: &[FeatureRanking]) -> BTreeMap<String, Vec<FeatureRanking>> {
    let mut out: BTreeMap<String, Vec<FeatureRanking>> = BTreeMap::new();
    for r in rankings {
        out.entry(r.label()).or_default().push(r.clone());
    }
    out
}

fn overlap(config: &PipelineConfig) -> Result<()> {
    let store: RankingStore = read_json(&config.path("rankings"))?;
    let mut matrices = Vec::new();
    for rs in by_label(&store.rankings).values().filter(|rs| rs.len() >= 2) {
        matrices.push(iou_overlap(rs)?);
    }
    let (k, m) = (store.k as f64, store.num_features as f64);
    let out = OverlapStore {
        k: store.k,
        num_features: store.num_features,
        random_baseline: k / (2.0 * m - k),
        matrices,
    };
    write_json(&config.path("overlap"), &out)
}

fn rank_multilingual(config: &PipelineConfig) -> Result<()> {
    let store: RankingStore = read_json(&config.path("rankings"))?;
    let mut out = MultilingualStore {
        sets: Vec::new(),
        massive: BTreeMap::new(),
        histograms: BTreeMap::new(),
        concept_overlap: None,
    };
    for (label, rs) in by_label(&store.rankings) {
        let set = multilingual_features(&rs)?;
        out.massive.insert(label.clone(), massively_multilingual(&set)?);
        out.histograms.insert(label, languages_per_feature_histogram(&set)?);
        out.sets.push(set);
    }
    let shared: Vec<_> = out.sets.iter().filter(|s| !s.multilingual().is_empty()).cloned().collect();
    if shared.len() >= 2 {
        out.concept_overlap = Some(concept_pair_overlap(&shared)?);
    }
    write_json(&config.path("multilingual"), &out)
}

fn ablate(config: &PipelineConfig) -> Result<()> {
    let sae = load_sae(config)?;
    let cache = load_cache(config, "eval_acts")?;
    let eval: Vec<AnnotatedSentence> = load_jsonl(&config.path("eval_corpus"))?;
    let probes: ProbeStore = read_json(&config.path("probes"))?;
    let ml: MultilingualStore = read_json(&config.path("multilingual"))?;
    let by_key: HashMap<(&str, u64), &AnnotatedSentence> = eval.iter().map(|s| ((s.language.as_str(), s.id), s)).collect();
    let mut items: BTreeMap<&str, Vec<(&AnnotatedSentence, AblationExample)>> = BTreeMap::new();
    for rec in &cache.records {
        let s = by_key
            .get(&(rec.language.as_str(), rec.id))
            .ok_or_else(|| anyhow!("activation record {}/{} has no corpus sentence", rec.language, rec.id))?;
        items.entry(s.language.as_str()).or_default().push((s, AblationExample::new(&sae, rec.acts.data(), false)?));
    }
    let mut examples = BTreeMap::new();
    for p in &probes.probes {
        let Some(mine) = items.get(p.language.as_str()) else { continue };
        let label = p.label();
        let (pos, neg) = select(mine, &label, config.probes.max_per_class, seed_for(config, &format!("ablate/{label}@{}", p.language)));
        let n = pos.len().min(neg.len());
        let ex: Vec<AblationExample> = pos[..n]
            .iter()
            .map(|e| (e, true))
            .chain(neg[..n].iter().map(|e| (e, false)))
            .map(|(e, label)| AblationExample { label, ..(*e).clone() })
            .collect();
        examples.insert((label.to_string(), p.language.clone()), ex);
    }
    let mut partitions = BTreeMap::new();
    for set in &ml.sets {
        let label = set.label();
        partitions.insert(
            label.clone(),
            FeaturePartition {
                monolingual: set.monolingual(),
                multilingual: set.multilingual(),
                massive: ml.massive.get(&label).map(|v| v.iter().copied().collect()).unwrap_or_default(),
            },
        );
    }
    let report: AblationReport = probe_ablation_eval(&probes.probes, &sae, &examples, &partitions)?;
    write_json(&config.path("ablation"), &report)
}

/// Multilingual features of `label`, most languages first, then largest
/// mean effect.
fn steering_candidates(store: &MultilingualStore, label: &str, n: usize) -> Vec<u32> {
    let Some(set) = store.sets.iter().find(|s| s.label() == label) else { return Vec::new() };
    let mut feats: Vec<(u32, usize, f64)> = set
        .features
        .iter()
        .filter(|(_, f)| f.languages.len() >= 2)
        .map(|(&i, f)| (i, f.languages.len(), f.mean_abs_effect))
        .collect();
    feats.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    feats.into_iter().take(n).map(|f| f.0).collect()
}

fn steer(config: &PipelineConfig) -> Result<()> {
    let lm = load_lm(config)?;
    let vocab = load_vocab(config)?;
    let sae = load_sae(config)?;
    let table: MaxActivationTable = read_json(&config.path("max_acts"))?;
    let store: ProbeStore = read_json(&config.path("probes"))?;
    let multilingual: MultilingualStore = read_json(&config.path("multilingual"))?;
    let pairs: Vec<MinimalPair> = load_jsonl(&config.path("pairs"))?;
    let sc = &config.steer;
    if sc.multipliers.is_empty() {
        bail!("no steering multipliers configured");
    }
    let target = format!("{}={}", sc.concept, sc.value);
    let candidates = match sc.feature {
        Some(f) => vec![f],
        None => steering_candidates(&multilingual, &target, sc.candidates),
    };
    if candidates.is_empty() {
        bail!("no multilingual {target} features to steer with");
    }
    let layer = store.layer;
    let steer_config = SteerConfig {
        max_steps: sc.max_steps,
        pool_prompt: sc.pool_prompt,
    };
    let mut languages = Vec::new();
    for lang in &config.languages {
        let probes: Vec<&ProbeParams> = store.probes.iter().filter(|p| &p.language == lang).collect();
        if store.find(&target, lang).is_none() || !probes.iter().any(|p| p.concept != sc.concept) {
            continue;
        }
        // prompts end where the other value would have to agree
        let prompts: Vec<Vec<u32>> = pairs
            .iter()
            .filter(|p| &p.language == lang && p.concept() == sc.concept)
            .filter_map(|p| (0..2).find(|&j| p.labels[j].value != sc.value).map(|j| prompt_ids(&vocab, &p.prefixes[j])))
            .take(sc.prompts_per_language)
            .collect();
        if prompts.is_empty() {
            continue;
        }
        let baselines = prompts
            .iter()
            .map(|prompt| baseline_generation(&lm, layer, &probes, prompt, &steer_config))
            .collect::<polylens_core::Result<Vec<_>>>()?;
        let mut runs = Vec::new();
        let mut best: Option<(usize, Vec<_>)> = None;
        // highest efficacy × selectivity, then efficacy; earlier runs win ties
        let score = |r: &SteeringRun| (r.efficacy * r.selectivity, r.efficacy);
        for &feature in &candidates {
            for &mult in &sc.multipliers {
                let mut spec = InterventionSpec::clamp(feature, mult, layer);
                spec.scope = sc.scope;
                let results = baselines
                    .iter()
                    .map(|b| steer_from_baseline(&lm, &sae, &spec, Some(&table), &probes, lang, b, &steer_config))
                    .collect::<polylens_core::Result<Vec<_>>>()?;
                let run = SteeringRun {
                    feature,
                    multiplier: mult,
                    efficacy: efficacy(&results, &target)?,
                    selectivity: selectivity(&results, &sc.concept)?,
                    degenerate: results.iter().filter(|r| r.degenerate).count(),
                    results: Vec::new(),
                };
                if best.as_ref().is_none_or(|(i, _)| score(&run) > score(&runs[*i])) {
                    best = Some((runs.len(), results));
                }
                runs.push(run);
            }
        }
        let (i, results) = best.expect("at least one run");
        runs[i].results = results;
        let b = &runs[i];
        languages.push(LanguageSteering {
            language: lang.clone(),
            candidates: candidates.clone(),
            prompts: prompts.len(),
            best_feature: b.feature,
            best_multiplier: b.multiplier,
            best_efficacy: b.efficacy,
            best_selectivity: b.selectivity,
            runs,
        });
    }
    let out = SteeringStore {
        concept: sc.concept.clone(),
        value: sc.value.clone(),
        scope: serde_json::to_value(sc.scope)?.as_str().unwrap_or_default().to_owned(),
        pool_prompt: sc.pool_prompt,
        languages,
    };
    write_json(&config.path("steering"), &out)
}
