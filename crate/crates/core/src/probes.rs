//! Logistic-regression probes on sum-pooled residual vectors, and the probe
//! logit as an affine metric over SAE features.

use nalgebra::{DMatrix, DVector};
use polylens_nn::rng::stream;
use polylens_nn::{Element, ScalarFn, Tape, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ConceptLabel;
use crate::error::{invalid, Result};
use crate::sae::SaeParams;

/// Fewest examples per class a probe is trained on.
pub const MIN_PER_CLASS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledExample {
    pub pooled: Vec<f32>,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    /// Subsample the majority class to the minority count.
    pub balance: bool,
    pub heldout_frac: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            balance: true,
            heldout_frac: 0.2,
            max_iter: 100,
            tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub balanced: bool,
    pub l2: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub concept: String,
    pub value: String,
    pub language: String,
    pub w: Vec<f32>,
    pub b: f32,
    pub metrics: ProbeMetrics,
}

impl ProbeParams {
    pub fn label(&self) -> ConceptLabel {
        ConceptLabel {
            concept: self.concept.clone(),
            value: self.value.clone(),
        }
    }

    /// `w·x + b`.
    pub fn logit(&self, pooled: &[f32]) -> Result<f64> {
        if pooled.len() != self.w.len() {
            return Err(invalid(format!("probe has {} weights, input has {}", self.w.len(), pooled.len())));
        }
        Ok(self.w.iter().zip(pooled).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>() + self.b as f64)
    }

    pub fn predict(&self, pooled: &[f32]) -> Result<bool> {
        Ok(self.logit(pooled)? > 0.0)
    }

    pub fn accuracy(&self, examples: &[PooledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(invalid("no examples"));
        }
        let mut right = 0;
        for e in examples {
            if self.predict(&e.pooled)? == e.label {
                right += 1;
            }
        }
        Ok(right as f64 / examples.len() as f64)
    }
}

/// Sum of the rows of `rows` (`[len × d]`) where `mask` is true.
pub fn pool_sum(rows: &[f32], mask: &[bool], d: usize) -> Result<Vec<f32>> {
    if d == 0 || rows.len() != mask.len() * d {
        return Err(invalid(format!("{} values do not form {} rows of width {d}", rows.len(), mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid("sentence has no non-pad positions"));
    }
    let mut out = vec![0.0f64; d];
    for (row, _) in rows.chunks(d).zip(mask).filter(|(_, &m)| m) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v as f64);
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Regularised logistic objective: `Σ log(1 + exp(−y·z)) + l2/2·‖w‖²`, bias
/// unpenalised. Returns the value.
pub fn logistic_objective(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> f64 {
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z: f64 = xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let s = if yi { z } else { -z };
        // log(1 + e^{−s}), stable for both signs
        loss += if s > 0.0 { (-s).exp().ln_1p() } else { -s + s.exp().ln_1p() };
    }
    loss + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Newton's method with backtracking on the regularised logistic objective.
/// Returns `(w, b, iterations, final gradient norm)`.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64, max_iter: usize, tol: f64) -> Result<(Vec<f64>, f64, usize, f64)> {
    let d = x.first().map_or(0, Vec::len);
    if x.is_empty() || d == 0 {
        return Err(invalid("no training data"));
    }
    if !(y.iter().any(|&v| v) && y.iter().any(|&v| !v)) {
        return Err(invalid("probe data has a single class"));
    }
    let p = d + 1;
    let mut theta = DVector::<f64>::zeros(p);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let mut g = DVector::<f64>::zeros(p);
        let mut h = DMatrix::<f64>::zeros(p, p);
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(theta.iter()).map(|(a, c)| a * c).sum::<f64>() + theta[d];
            let mu = sigmoid(z);
            let r = mu - if yi { 1.0 } else { 0.0 };
            let s = mu * (1.0 - mu);
            for j in 0..d {
                g[j] += r * xi[j];
                for k in j..d {
                    h[(j, k)] += s * xi[j] * xi[k];
                }
                h[(j, d)] += s * xi[j];
            }
            g[d] += r;
            h[(d, d)] += s;
        }
        for j in 0..d {
            g[j] += l2 * theta[j];
            h[(j, j)] += l2;
        }
        for j in 0..p {
            for k in 0..j {
                h[(j, k)] = h[(k, j)];
            }
        }
        grad_norm = g.norm();
        if grad_norm < tol {
            break;
        }
        // tiny ridge on the bias direction keeps separable data solvable
        h[(d, d)] += 1e-12;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let current = logistic_objective(x, y, &theta.as_slice()[..d], theta[d], l2);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let value = logistic_objective(x, y, &cand.as_slice()[..d], cand[d], l2);
            if value <= current - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
    }
    let w = theta.as_slice()[..d].to_vec();
    Ok((w, theta[d], iterations, grad_norm))
}

fn split<'a>(v: &[&'a PooledExample], frac: f64) -> (Vec<&'a PooledExample>, Vec<&'a PooledExample>) {
    let held = ((v.len() as f64 * frac).round() as usize).clamp(1, v.len() - 1);
    (v[held..].to_vec(), v[..held].to_vec())
}

/// Trains one probe. Examples are balanced (if configured), shuffled with
/// `seed`, and split per class into train and held-out parts.
pub fn train_probe(label: &ConceptLabel, language: &str, examples: &[PooledExample], config: &ProbeConfig, seed: u64) -> Result<ProbeParams> {
    let d = examples.first().map_or(0, |e| e.pooled.len());
    if examples.iter().any(|e| e.pooled.len() != d) || d == 0 {
        return Err(invalid("pooled vectors of inconsistent width"));
    }
    let mut rng = stream(seed, &format!("probe/{language}/{label}"));
    let mut pos: Vec<&PooledExample> = examples.iter().filter(|e| e.label).collect();
    let mut neg: Vec<&PooledExample> = examples.iter().filter(|e| !e.label).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid(format!("{label} in {language}: probe data has a single class")));
    }
    if pos.len() < MIN_PER_CLASS || neg.len() < MIN_PER_CLASS {
        return Err(invalid(format!(
            "{label} in {language}: {} positive and {} negative examples, need {MIN_PER_CLASS} of each",
            pos.len(),
            neg.len()
        )));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    if config.balance {
        let n = pos.len().min(neg.len());
        pos.truncate(n);
        neg.truncate(n);
    }
    let (n_positive, n_negative) = (pos.len(), neg.len());
    let (mut train, mut test) = split(&pos, config.heldout_frac);
    let (tn, hn) = split(&neg, config.heldout_frac);
    train.extend(tn);
    test.extend(hn);
    let x: Vec<Vec<f64>> = train.iter().map(|e| e.pooled.iter().map(|&v| v as f64).collect()).collect();
    let y: Vec<bool> = train.iter().map(|e| e.label).collect();
    let (w, b, iterations, grad_norm) = fit_logistic(&x, &y, config.l2, config.max_iter, config.tol)?;
    let mut probe = ProbeParams {
        concept: label.concept.clone(),
        value: label.value.clone(),
        language: language.to_owned(),
        w: w.iter().map(|&v| v as f32).collect(),
        b: b as f32,
        metrics: ProbeMetrics {
            train_accuracy: 0.0,
            heldout_accuracy: 0.0,
            n_train: train.len(),
            n_heldout: test.len(),
            n_positive,
            n_negative,
            balanced: config.balance,
            l2: config.l2,
            iterations,
            grad_norm,
        },
    };
    let owned = |v: &[&PooledExample]| v.iter().map(|&e| e.clone()).collect::<Vec<_>>();
    probe.metrics.train_accuracy = probe.accuracy(&owned(&train))?;
    probe.metrics.heldout_accuracy = probe.accuracy(&owned(&test))?;
    Ok(probe)
}

/// The probe logit as a function of sum-pooled SAE features `A`:
/// `m(A) = w_eff·A + offset`, with `w_eff = W_dᵀ w` and the decoder bias and
/// pooled error term of the clean sentence folded into `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMetric {
    pub w_eff: Vec<f64>,
    pub offset: f64,
}

impl FeatureMetric {
    /// `feats` is `[len × m]`, `errors` is `[len × n]` (`x − x̂` per token).
    pub fn new(probe: &ProbeParams, sae: &SaeParams, feats: &[f32], errors: &[f64], mask: &[bool]) -> Result<Self> {
        let (n, m) = (sae.d_model(), sae.num_features());
        if probe.w.len() != n {
            return Err(invalid(format!("probe width {} differs from SAE width {n}", probe.w.len())));
        }
        if feats.len() != mask.len() * m || errors.len() != mask.len() * n {
            return Err(invalid("feature or error rows do not match the mask"));
        }
        let w_d = sae.w_d().data();
        let w_eff: Vec<f64> = (0..m).map(|i| (0..n).map(|r| w_d[r * m + i] as f64 * probe.w[r] as f64).sum()).collect();
        let kept = mask.iter().filter(|&&k| k).count() as f64;
        let mut pooled_err = vec![0.0f64; n];
        for (row, _) in errors.chunks(n).zip(mask).filter(|(_, &k)| k) {
            pooled_err.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let offset = probe.b as f64
            + (0..n)
                .map(|r| probe.w[r] as f64 * (kept * sae.b_d().data()[r] as f64 + pooled_err[r]))
                .sum::<f64>();
        Ok(Self { w_eff, offset })
    }

    pub fn value(&self, pooled_features: &[f64]) -> f64 {
        self.w_eff.iter().zip(pooled_features).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }
}

impl ScalarFn for FeatureMetric {
    fn eval<'t, S: Element>(&self, tape: &'t Tape<S>, a: Var<'t, S>) -> polylens_nn::Result<Var<'t, S>> {
        let w = tape.values(a.shape(), self.w_eff.iter().map(|&v| S::of(v)).collect(), false)?;
        a.mul(w)?.sum().add(tape.scalar(S::of(self.offset)))
    }
}

/// Sum over masked positions of per-token feature rows.
pub fn pool_features(feats: &[f32], mask: &[bool], m: usize) -> Result<Vec<f64>> {
    Ok(pool_sum(feats, mask, m)?.into_iter().map(f64::from).collect())
}
