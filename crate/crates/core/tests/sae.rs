use polylens_core::lm::{ActRecord, ActivationCache, LmParams, TransformerConfig};
use polylens_core::sae::{
    column_norms, loss_recovered, loss_recovered_with, max_feature_activations, recompose, train_sae, GatedSaeParams,
    SaeParams, SaeTrainConfig, SaeVariant, StandardSaeParams,
};
use polylens_nn::rng::stream;
use polylens_nn::Tensor;
use proptest::prelude::*;
use rand::Rng;

const N: usize = 8;

/// Tokens that are sparse non-negative mixtures of 16 random directions plus an offset.
fn synthetic_tokens(count: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "synthetic");
    let dirs: Vec<Vec<f32>> = (0..16).map(|_| (0..N).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut data = Vec::with_capacity(count * N);
    for _ in 0..count {
        let mut x: Vec<f32> = (0..N).map(|i| 0.3 * i as f32).collect();
        for _ in 0..2 {
            let d = &dirs[rng.random_range(0..16)];
            let a: f32 = rng.random_range(0.5..2.0);
            x.iter_mut().zip(d).for_each(|(v, &u)| *v += a * u);
        }
        data.extend(x);
    }
    Tensor::new([count, N], data).unwrap()
}

fn config(l1: f64) -> SaeTrainConfig {
    SaeTrainConfig {
        l1,
        lr: 3e-3,
        expansion: 4,
        batch_size: 128,
        warmup_steps: 20,
        token_budget: 60_000,
        squared_standard: false,
    }
}

fn mse(sae: &SaeParams, tokens: &Tensor) -> f64 {
    let x_hat = sae.decode_batch(&sae.encode_batch(tokens.data()).unwrap()).unwrap();
    x_hat.iter().zip(tokens.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / tokens.data().len() as f64
}

#[test]
fn trained_decoders_have_unit_columns_and_exact_decomposition() {
    let tokens = synthetic_tokens(4000, 1);
    for variant in [SaeVariant::Standard, SaeVariant::Gated] {
        let (sae, report) = train_sae(&config(0.05), &tokens, variant, 3).unwrap();
        assert_eq!(sae.num_features(), 32);
        for norm in column_norms(sae.w_d()) {
            assert!((norm - 1.0).abs() < 1e-5, "{variant:?} column norm {norm}");
        }
        for x in tokens.data().chunks(N) {
            let d = sae.decompose(x).unwrap();
            assert_eq!(recompose(&d.x_hat, &d.error), x);
        }
        let first = report.losses[..20].iter().sum::<f32>();
        let last = report.losses[report.losses.len() - 20..].iter().sum::<f32>();
        assert!(last < first, "{variant:?} loss did not fall");
        assert_eq!(report.auxiliary.is_empty(), variant == SaeVariant::Standard);
        assert!((0.0..=1.0).contains(&report.dead_fraction));
    }
}

#[test]
fn training_is_deterministic() {
    let tokens = synthetic_tokens(3300, 2);
    let a = train_sae(&config(0.05), &tokens, SaeVariant::Gated, 7).unwrap();
    let b = train_sae(&config(0.05), &tokens, SaeVariant::Gated, 7).unwrap();
    assert_eq!(a, b);
    let c = train_sae(&config(0.05), &tokens, SaeVariant::Gated, 8).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn no_sparsity_penalty_reconstructs_better() {
    let tokens = synthetic_tokens(4000, 3);
    for variant in [SaeVariant::Standard, SaeVariant::Gated] {
        let (free, r_free) = train_sae(&config(0.0), &tokens, variant, 4).unwrap();
        let (sparse, r_sparse) = train_sae(&config(SaeTrainConfig::default().l1), &tokens, variant, 4).unwrap();
        assert!(mse(&free, &tokens) < mse(&sparse, &tokens), "{variant:?}");
        assert!(r_free.mean_l0 > r_sparse.mean_l0, "{variant:?}");
    }
}

#[test]
fn invalid_budgets_rejected() {
    let tokens = synthetic_tokens(100, 4);
    assert!(train_sae(&config(0.05), &tokens, SaeVariant::Standard, 0).is_err());
    let tokens = synthetic_tokens(3200, 4);
    assert!(train_sae(&config(-1.0), &tokens, SaeVariant::Standard, 0).is_err());
    assert!(train_sae(&config(f64::NAN), &tokens, SaeVariant::Gated, 0).is_err());
}

fn tiny_lm() -> (LmParams, Vec<Vec<u32>>) {
    let config = TransformerConfig {
        d_model: N,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        hook_layer: 0,
        ..TransformerConfig::new(12, 10)
    };
    let lm = LmParams::init(config, 5).unwrap();
    let seqs = vec![vec![1, 4, 5, 6, 2], vec![1, 7, 8, 2], vec![1, 9, 10, 11, 3, 2]];
    (lm, seqs)
}

fn zero_standard(m: usize) -> SaeParams {
    SaeParams::Standard(StandardSaeParams {
        w_e: Tensor::zeros([m, N]),
        b_e: Tensor::zeros([m]),
        w_d: Tensor::zeros([N, m]),
        b_d: Tensor::zeros([N]),
    })
}

#[test]
fn loss_recovered_end_points() {
    let (lm, seqs) = tiny_lm();
    let identity = loss_recovered_with(&lm, &seqs, 0, 2, &|x: &[f32]| x.to_vec()).unwrap();
    assert!((identity.fraction - 1.0).abs() < 1e-4, "{identity:?}");
    assert_eq!(identity.reconstructed, identity.original);
    let zero = loss_recovered(&lm, &zero_standard(16), &seqs, 0, 2).unwrap();
    assert!(zero.fraction.abs() < 1e-4, "{zero:?}");
    assert_eq!(zero.reconstructed, zero.zero);
    assert!(loss_recovered(&lm, &zero_standard(16), &[], 0, 2).is_err());
}

#[test]
fn max_activations_match_brute_force() {
    let tokens = synthetic_tokens(3300, 6);
    let (sae, _) = train_sae(&config(0.05), &tokens, SaeVariant::Gated, 1).unwrap();
    let records: Vec<ActRecord> = tokens
        .data()
        .chunks(11 * N)
        .enumerate()
        .map(|(i, c)| ActRecord {
            id: i as u64,
            language: "en".into(),
            mask: vec![true; c.len() / N],
            acts: Tensor::new([c.len() / N, N], c.to_vec()).unwrap(),
        })
        .collect();
    let (a, b) = records.split_at(100);
    let cache = |records: &[ActRecord]| ActivationCache {
        d_model: N,
        layer: 0,
        records: records.to_vec(),
    };
    let table = max_feature_activations(&sae, &cache(&records)).unwrap();
    assert_eq!(table.tokens, 3300);
    let m = sae.num_features();
    let mut oracle = vec![0.0f32; m];
    for x in tokens.data().chunks(N) {
        let f = sae.encode(x).unwrap().to_dense();
        oracle.iter_mut().zip(&f).for_each(|(o, &v)| *o = o.max(v));
    }
    assert_eq!(table.max, oracle);
    let merged = max_feature_activations(&sae, &cache(a)).unwrap().merge(&max_feature_activations(&sae, &cache(b)).unwrap()).unwrap();
    assert_eq!(merged, table);
}

fn affine(w: &[f32], b: &[f32], x: &[f64], row: usize) -> f64 {
    let n = x.len();
    b[row] as f64 + (0..n).map(|k| w[row * n + k] as f64 * x[k]).sum::<f64>()
}

proptest! {
    #[test]
    fn gate_decides_support_and_magnitude_decides_value(
        w_gate in prop::collection::vec(-1.0f32..1.0, 3 * 2),
        w_mag in prop::collection::vec(-1.0f32..1.0, 3 * 2),
        b_gate in prop::collection::vec(-0.5f32..0.5, 3),
        b_mag in prop::collection::vec(-0.5f32..0.5, 3),
        b_d in prop::collection::vec(-0.5f32..0.5, 2),
        x in prop::collection::vec(-2.0f32..2.0, 2),
    ) {
        let sae = SaeParams::Gated(GatedSaeParams {
            w_gate: Tensor::new([3, 2], w_gate.clone()).unwrap(),
            b_gate: Tensor::new([3], b_gate.clone()).unwrap(),
            w_mag: Tensor::new([3, 2], w_mag.clone()).unwrap(),
            b_mag: Tensor::new([3], b_mag.clone()).unwrap(),
            w_d: Tensor::new([2, 3], vec![1.0, 0.0, 0.6, 0.0, 1.0, 0.8]).unwrap(),
            b_d: Tensor::new([2], b_d.clone()).unwrap(),
        });
        let f = sae.encode(&x).unwrap().to_dense();
        let c: Vec<f64> = x.iter().zip(&b_d).map(|(&a, &b)| a as f64 - b as f64).collect();
        for i in 0..3 {
            let gate = affine(&w_gate, &b_gate, &c, i);
            let mag = affine(&w_mag, &b_mag, &c, i);
            prop_assume!(gate.abs() > 1e-4);
            let expect = if gate > 0.0 { mag.max(0.0) } else { 0.0 };
            prop_assert!((f[i] as f64 - expect).abs() < 1e-5, "feature {} got {} want {}", i, f[i], expect);
        }
    }
}
