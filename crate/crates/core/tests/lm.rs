use polylens_core::corpus::{generate_corpus, make_minimal_pairs, spec_for, Vocabulary};
use polylens_core::lm::{extract_activations, minimal_pair_accuracy, pair_outcomes, train_lm, ActivationCache, LmParams, LmTrainConfig, TransformerConfig};

fn small_config(vocab: usize, max_seq: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        hook_layer: 1,
        ..TransformerConfig::new(vocab, max_seq)
    }
}

fn steps(n: usize, batch_size: usize) -> LmTrainConfig {
    LmTrainConfig {
        epochs: n,
        batch_size,
        lr: 1e-2,
        warmup_steps: 10,
        max_steps: Some(n),
        ..LmTrainConfig::default()
    }
}

#[test]
fn memorises_a_single_sentence() {
    let seqs = vec![vec![1u32, 5, 6, 7, 8, 9, 2]];
    let (params, report) = train_lm(small_config(11, 8), &seqs, &steps(200, 1), 4).unwrap();
    assert_eq!(report.step_losses.len(), 200);
    assert!(report.final_loss().unwrap() < report.initial_loss().unwrap());
    let loss = params.loss(&seqs, 1, None).unwrap();
    assert!(loss < 0.1, "per-token loss {loss}");
}

#[test]
fn memorised_pair_is_scored_correct() {
    let en = spec_for("en").unwrap();
    let vocab = Vocabulary::from_specs(std::slice::from_ref(&en));
    let pairs = make_minimal_pairs(&en, "Number", 1, 3).unwrap();
    let seqs: Vec<Vec<u32>> = (0..2)
        .map(|j| {
            let mut words = pairs[0].prefixes[j].clone();
            words.push(pairs[0].continuations[j].clone());
            vocab.encode_unpadded(&words)
        })
        .collect();
    let (params, _) = train_lm(small_config(vocab.len(), 24), &seqs, &steps(300, 2), 5).unwrap();
    assert_eq!(minimal_pair_accuracy(&params, &vocab, &pairs).unwrap(), 1.0);
}

#[test]
fn training_is_deterministic_and_frozen_eval_repeats() {
    let seqs = vec![vec![1u32, 4, 5, 2], vec![1, 6, 7, 8, 2], vec![1, 9, 2]];
    let a = train_lm(small_config(11, 8), &seqs, &steps(6, 2), 9).unwrap();
    let b = train_lm(small_config(11, 8), &seqs, &steps(6, 2), 9).unwrap();
    assert_eq!(a, b);
    let c = train_lm(small_config(11, 8), &seqs, &steps(6, 2), 10).unwrap();
    assert_ne!(a.0, c.0);
    let params = a.0;
    assert_eq!(params.loss(&seqs, 2, None).unwrap(), params.loss(&seqs, 2, None).unwrap());
}

#[test]
fn empty_corpus_rejected() {
    assert!(train_lm(small_config(11, 8), &[], &steps(1, 1), 0).is_err());
}

#[test]
fn activation_cache_shape_determinism_and_round_trip() {
    let en = spec_for("en").unwrap();
    let vocab = Vocabulary::from_specs(std::slice::from_ref(&en));
    let sentences = generate_corpus(&[en], 10, 1).unwrap();
    let mut config = TransformerConfig::new(vocab.len(), 32);
    config.hook_layer = 2;
    let params = LmParams::init(config, 2).unwrap();
    let cache = extract_activations(&params, &vocab, &sentences, 2, 4).unwrap();
    assert_eq!(cache.records.len(), 10);
    for (r, s) in cache.records.iter().zip(&sentences) {
        let len = vocab.encode_unpadded(&s.forms()).len();
        assert_eq!(r.acts.shape(), &[len, 64]);
        assert_eq!(r.mask.len(), len);
        assert_eq!((r.id, r.language.as_str()), (s.id, "en"));
    }
    // batch composition does not change the values
    assert_eq!(extract_activations(&params, &vocab, &sentences, 2, 4).unwrap(), cache);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acts.plac");
    cache.save(&path).unwrap();
    assert_eq!(ActivationCache::load(&path).unwrap(), cache);
    assert!(extract_activations(&params, &vocab, &sentences, 4, 4).is_err());
}

/// Each side alone is a coin flip. The sides are not independent: a random
/// model barely conditions on the prefix, so it tends to prefer the same
/// continuation on both sides and the joint rate falls below one quarter.
#[test]
fn untrained_model_is_at_chance_per_side() {
    let (mut joint, mut side, mut n) = (0usize, 0usize, 0usize);
    for lang in ["en", "fr", "de", "hi", "cy", "tr"] {
        let spec = spec_for(lang).unwrap();
        let vocab = Vocabulary::from_specs(std::slice::from_ref(&spec));
        for seed in 0..3 {
            let params = LmParams::init(TransformerConfig::new(vocab.len(), 32), seed).unwrap();
            let pairs = make_minimal_pairs(&spec, "Number", 100, seed).unwrap();
            let outcomes = pair_outcomes(&params, &vocab, &pairs).unwrap();
            assert_eq!(
                minimal_pair_accuracy(&params, &vocab, &pairs).unwrap(),
                outcomes.iter().filter(|o| o.both()).count() as f64 / pairs.len() as f64
            );
            joint += outcomes.iter().filter(|o| o.both()).count();
            side += outcomes.iter().flat_map(|o| o.sides).filter(|&c| c).count();
            n += outcomes.len();
        }
    }
    let side = side as f64 / (2 * n) as f64;
    let joint = joint as f64 / n as f64;
    assert!((side - 0.5).abs() <= 0.1, "per-side {side}");
    assert!(joint < 0.25, "joint {joint}");
}
