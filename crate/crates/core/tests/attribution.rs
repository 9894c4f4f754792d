use polylens_core::attribution::{atp, estimate, exact_all, ig_attribution, metric_grad, Estimator};
use polylens_core::probes::FeatureMetric;
use polylens_nn::rng::stream;
use polylens_nn::{Element, ScalarFn, Tape, Var};
use proptest::prelude::*;
use rand::Rng;

struct Square;

impl ScalarFn for Square {
    fn eval<'t, S: Element>(&self, _: &'t Tape<S>, a: Var<'t, S>) -> polylens_nn::Result<Var<'t, S>> {
        Ok(a.mul(a)?.sum())
    }
}

#[test]
fn estimators_agree_on_affine_metric() {
    let mut rng = stream(11, "affine-pairs");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = 24;
        let metric = FeatureMetric {
            w_eff: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
            offset: rng.random_range(-1.0..1.0),
        };
        // sparse non-negative activations, as an SAE produces
        let mut draw = || -> Vec<f64> {
            (0..m).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..5.0) } else { 0.0 }).collect()
        };
        let (clean, patch) = (draw(), draw());
        let exact = exact_all(&metric, &clean, &patch).unwrap();
        for est in [Estimator::Atp, Estimator::ig(10)] {
            let e = estimate(&metric, &clean, &patch, est).unwrap();
            for (a, b) in e.iter().zip(&exact) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-4, "max disagreement {worst}");
}

#[test]
fn square_metric_ig_converges_to_exact() {
    let exact = exact_all(&Square, &[1.0], &[3.0]).unwrap()[0];
    assert_eq!(exact, 8.0);
    assert_eq!(atp(&Square, &[1.0], &[3.0]).unwrap()[0], 4.0);
    let mut last_gap = f64::INFINITY;
    for k in [1, 2, 4, 8, 10, 16, 32, 64, 128, 256] {
        let ig = ig_attribution(&Square, &[1.0], &[3.0], k, true).unwrap()[0];
        // gradient 2a averaged over a = 3 − 2j/K, j < K, times Δ = 2
        assert!((ig - (8.0 + 4.0 / k as f64)).abs() < 1e-9, "K={k}: {ig}");
        let gap = (ig - exact).abs();
        assert!(gap < last_gap);
        last_gap = gap;
        if k == 10 {
            assert!((ig - 8.4).abs() < 1e-9);
        }
    }
    assert!(last_gap / exact < 0.01);
}

proptest! {
    #[test]
    fn feature_metric_is_affine(
        w in prop::collection::vec(-2.0f64..2.0, 6),
        offset in -1.0f64..1.0,
        a in prop::collection::vec(0.0f64..4.0, 6),
        b in prop::collection::vec(0.0f64..4.0, 6),
        t in 0.0f64..1.0,
    ) {
        let m = FeatureMetric { w_eff: w.clone(), offset };
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = m.value(&mix);
        let rhs = t * m.value(&a) + (1.0 - t) * m.value(&b);
        prop_assert!((lhs - rhs).abs() < 1e-9);
        let (v, g) = metric_grad(&m, &a).unwrap();
        prop_assert!((v - m.value(&a)).abs() < 1e-9);
        for (gi, wi) in g.iter().zip(&w) {
            prop_assert!((gi - wi).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_effects_sum_to_total_change_for_affine(
        w in prop::collection::vec(-2.0f64..2.0, 5),
        a in prop::collection::vec(0.0f64..4.0, 5),
        b in prop::collection::vec(0.0f64..4.0, 5),
    ) {
        let m = FeatureMetric { w_eff: w, offset: 0.3 };
        let total: f64 = exact_all(&m, &a, &b).unwrap().iter().sum();
        prop_assert!((total - (m.value(&b) - m.value(&a))).abs() < 1e-9);
    }
}
