use polylens_core::corpus::ConceptLabel;
use polylens_core::probes::{fit_logistic, logistic_objective, train_probe, PooledExample, ProbeConfig};
use polylens_nn::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Noisy linear labels, so the optimum is finite.
fn noisy_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = stream(seed, "probe-data");
    let truth = gaussian(&mut rng, d);
    let x: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, d)).collect();
    let y = x
        .iter()
        .map(|xi| {
            let z: f64 = xi.iter().zip(&truth).map(|(a, b)| a * b).sum();
            rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())
        })
        .collect();
    (x, y)
}

/// Plain gradient descent with step `1/L` on the same objective.
fn gradient_descent(x: &[Vec<f64>], y: &[bool], l2: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let lipschitz = x.iter().map(|xi| xi.iter().map(|v| v * v).sum::<f64>() + 1.0).sum::<f64>() / 4.0 + l2;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..iters {
        let mut gw: Vec<f64> = w.iter().map(|v| l2 * v).collect();
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = 1.0 / (1.0 + (-z).exp()) - if yi { 1.0 } else { 0.0 };
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += r * v);
            gb += r;
        }
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= g / lipschitz);
        b -= gb / lipschitz;
    }
    (w, b)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[test]
fn newton_solution_matches_gradient_descent() {
    for seed in 0..3 {
        let (x, y) = noisy_data(300, 6, seed);
        let (w, b, _, grad_norm) = fit_logistic(&x, &y, 1.0, 100, 1e-10).unwrap();
        assert!(grad_norm < 1e-8);
        let (w_gd, b_gd) = gradient_descent(&x, &y, 1.0, 20_000);
        assert!(cosine(&w, &w_gd) > 0.999, "seed {seed}");
        assert!((b - b_gd).abs() < 1e-3);
        let f = logistic_objective(&x, &y, &w, b, 1.0);
        assert!(f <= logistic_objective(&x, &y, &w_gd, b_gd, 1.0) + 1e-9);
    }
}

fn examples(n: usize, d: usize, seed: u64, separable: bool) -> Vec<PooledExample> {
    let mut rng = stream(seed, "probe-examples");
    (0..n)
        .map(|i| {
            let label = if separable { i % 2 == 0 } else { rng.random_bool(0.5) };
            let mut v = gaussian(&mut rng, d);
            if separable {
                v[0] += if label { 2.5 } else { -2.5 };
            }
            PooledExample {
                pooled: v.into_iter().map(|x| x as f32).collect(),
                label,
            }
        })
        .collect()
}

#[test]
fn separated_concept_is_probed_accurately() {
    let label = ConceptLabel::new("Number", "Plur").unwrap();
    let probe = train_probe(&label, "en", &examples(1000, 8, 1, true), &ProbeConfig::default(), 2).unwrap();
    assert!(probe.metrics.heldout_accuracy >= 0.9, "{:?}", probe.metrics);
    assert_eq!(probe.metrics.n_train + probe.metrics.n_heldout, 1000);
}

#[test]
fn shuffled_labels_are_at_chance() {
    let label = ConceptLabel::new("Number", "Plur").unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let probe = train_probe(&label, "en", &examples(1000, 8, seed + 10, false), &ProbeConfig::default(), seed).unwrap();
        accs.push(probe.metrics.heldout_accuracy);
    }
    for a in &accs {
        assert!((a - 0.5).abs() <= 0.1, "{accs:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let label = ConceptLabel::new("Tense", "Past").unwrap();
    let data = examples(200, 4, 3, true);
    let a = train_probe(&label, "fr", &data, &ProbeConfig::default(), 9).unwrap();
    assert_eq!(a, train_probe(&label, "fr", &data, &ProbeConfig::default(), 9).unwrap());
}
