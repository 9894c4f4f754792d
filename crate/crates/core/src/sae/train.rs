use polylens_nn::rng::stream;
use polylens_nn::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_gated, loss_standard, normalize_columns, SaeParams, SaeVariant};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub l1: f64,
    pub lr: f32,
    pub expansion: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub token_budget: usize,
    /// Square the reconstruction norm in the standard loss.
    pub squared_standard: bool,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            l1: 0.505,
            lr: 1e-3,
            expansion: 8,
            batch_size: 512,
            warmup_steps: 1000,
            token_budget: 2_000_000,
            squared_standard: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub losses: Vec<f32>,
    pub reconstruction: Vec<f32>,
    pub sparsity: Vec<f32>,
    pub auxiliary: Vec<f32>,
    /// Features that never fire on the training tokens after training.
    pub dead_fraction: f64,
    /// Mean number of active features per token after training.
    pub mean_l0: f64,
    /// Factor applied to inputs during training so their mean norm is
    /// `sqrt(d_model)`; folded back into the biases afterwards.
    pub input_scale: f64,
}

/// Removes from each decoder column's gradient its component along the column.
fn project_decoder_grad(w_d: &mut Tensor) -> Result<()> {
    let (n, m) = w_d.dims2()?;
    let w = w_d.data().to_vec();
    let Some(g) = w_d.grad_mut() else { return Ok(()) };
    for c in 0..m {
        let dot: f64 = (0..n).map(|r| g[r * m + c] as f64 * w[r * m + c] as f64).sum();
        for r in 0..n {
            g[r * m + c] -= (dot * w[r * m + c] as f64) as f32;
        }
    }
    Ok(())
}

fn fold_scale(params: &mut SaeParams, s: f64) {
    let scale = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
    match params {
        SaeParams::Standard(p) => {
            scale(&mut p.b_e);
            scale(&mut p.b_d);
        }
        SaeParams::Gated(p) => {
            scale(&mut p.b_gate);
            scale(&mut p.b_mag);
            scale(&mut p.b_d);
        }
    }
}

/// Trains an SAE on the rows of `tokens` (`[N × d_model]`).
pub fn train_sae(config: &SaeTrainConfig, tokens: &Tensor, variant: SaeVariant, seed: u64) -> Result<(SaeParams, SaeTrainReport)> {
    let (count, n) = tokens.dims2()?;
    let m = config.expansion * n;
    if config.l1 < 0.0 || !config.l1.is_finite() {
        return Err(invalid(format!("L1 coefficient must be finite and non-negative, got {}", config.l1)));
    }
    if m == 0 || config.batch_size == 0 {
        return Err(invalid("expansion factor and batch size must be positive"));
    }
    if count < 100 * m {
        return Err(invalid(format!("{count} tokens is below the floor of 100 × {m} features")));
    }
    let mean_norm = tokens.data().chunks(n).map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / count as f64;
    let s = if mean_norm > 0.0 { (n as f64).sqrt() / mean_norm } else { 1.0 };
    let data: Vec<f32> = tokens.data().iter().map(|&v| (v as f64 * s) as f32).collect();

    let mut params = SaeParams::init(variant, n, m, seed)?;
    let mut rng = stream(seed, "sae-shuffle");
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    {
        let warm = &order[..count.min(4096)];
        let mut mean = vec![0.0f64; n];
        for &i in warm {
            mean.iter_mut().zip(&data[i * n..(i + 1) * n]).for_each(|(a, &b)| *a += b as f64);
        }
        let b_d = match &mut params {
            SaeParams::Standard(p) => &mut p.b_d,
            SaeParams::Gated(p) => &mut p.b_d,
        };
        b_d.data_mut().iter_mut().zip(&mean).for_each(|(v, &a)| *v = (a / warm.len() as f64) as f32);
    }

    let steps = config.token_budget.div_ceil(config.batch_size).max(1);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        warmup_steps: config.warmup_steps,
        ..AdamConfig::default()
    });
    let mut report = SaeTrainReport {
        input_scale: s,
        ..SaeTrainReport::default()
    };
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(config.batch_size * n);
    for step in 0..steps {
        batch.clear();
        for _ in 0..config.batch_size {
            if cursor == count {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            batch.extend_from_slice(&data[i * n..(i + 1) * n]);
            cursor += 1;
        }
        let tape = Tape::new();
        let x = tape.values([config.batch_size, n], batch.clone(), false)?;
        let vars: Vec<_> = params.named().into_iter().map(|(_, t)| tape.param(t)).collect();
        let terms = match variant {
            SaeVariant::Standard => loss_standard(x, vars[0], vars[1], vars[2], vars[3], config.l1, config.squared_standard)?,
            SaeVariant::Gated => loss_gated(x, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], config.l1)?,
        };
        let loss = terms.total.item();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite SAE loss {loss} at step {step}")));
        }
        report.losses.push(loss);
        report.reconstruction.push(terms.reconstruction.item());
        report.sparsity.push(terms.sparsity.item());
        if let Some(a) = terms.auxiliary {
            report.auxiliary.push(a.item());
        }
        let grads = tape.backward(terms.total, None)?;
        let mut tensors = params.tensors_mut();
        for (v, t) in vars.iter().zip(tensors.iter_mut()) {
            t.clear_grad();
            grads.accumulate_into(*v, t)?;
        }
        // the decoder sits at the same slot in both variants: second to last
        let w_d_slot = tensors.len() - 2;
        project_decoder_grad(tensors[w_d_slot])?;
        adam.step(&mut tensors)?;
        normalize_columns(tensors[w_d_slot])?;
        for t in tensors.iter_mut() {
            t.clear_grad();
        }
    }
    fold_scale(&mut params, s);

    let mut ever = vec![false; m];
    let mut active = 0usize;
    for chunk in tokens.data().chunks(4096 * n) {
        let f = params.encode_batch(chunk)?;
        for row in f.chunks(m) {
            for (e, &v) in ever.iter_mut().zip(row) {
                if v > 0.0 {
                    *e = true;
                    active += 1;
                }
            }
        }
    }
    report.dead_fraction = ever.iter().filter(|&&e| !e).count() as f64 / m as f64;
    report.mean_l0 = active as f64 / count as f64;
    Ok((params, report))
}
