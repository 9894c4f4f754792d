use polylens_nn::rng::stream;
use polylens_nn::{clip_grad_norm, AdamConfig, AdamState, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Batch, LmParams, TransformerConfig};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: u64,
    /// Final learning rate as a fraction of `lr`, reached by linear decay.
    pub final_lr_frac: f32,
    pub clip_norm: f32,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            final_lr_frac: 0.1,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token loss of every optimizer step.
    pub step_losses: Vec<f32>,
    pub epoch_losses: Vec<f32>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f32> {
        self.step_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.epoch_losses.last().copied()
    }
}

/// Shuffled batches of similar-length sequences, to cut padding.
fn length_bucketed(seqs: &[Vec<u32>], order: &mut [usize], batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for window in order.chunks_mut(batch_size * 16) {
        window.sort_by_key(|&i| seqs[i].len());
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains from a fresh initialisation on token sequences (BOS ... EOS).
pub fn train_lm(config: TransformerConfig, seqs: &[Vec<u32>], train: &LmTrainConfig, seed: u64) -> Result<(LmParams, TrainReport)> {
    if seqs.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() < 2 || s.len() > config.max_seq_len) {
        return Err(invalid(format!("training sequence of length {} outside 2..={}", s.len(), config.max_seq_len)));
    }
    let mut params = LmParams::init(config, seed)?;
    let batch_size = train.batch_size.max(1);
    let per_epoch = seqs.len().div_ceil(batch_size);
    let total = train.max_steps.unwrap_or(usize::MAX).min(per_epoch * train.epochs).max(1);
    let mut adam = AdamState::new(AdamConfig {
        lr: train.lr,
        warmup_steps: train.warmup_steps,
        ..AdamConfig::default()
    });
    let mut rng = stream(seed, "lm-shuffle");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;
    for _ in 0..train.epochs {
        if step >= total {
            break;
        }
        let batches = length_bucketed(seqs, &mut order, batch_size, &mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in &batches {
            if step >= total {
                break;
            }
            let rows: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = Batch::new(&rows)?;
            let tape = Tape::new();
            let vars = params.register(&tape, true);
            let (_, logits) = params.forward_vars(&tape, &vars, &batch, None)?;
            let loss = logits.cross_entropy(batch.targets())?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss {value} at step {step}")));
            }
            let grads = tape.backward(loss, None)?;
            let all = vars.all();
            let mut tensors = params.tensors_mut();
            for (v, t) in all.iter().zip(tensors.iter_mut()) {
                t.clear_grad();
                grads.accumulate_into(*v, t)?;
            }
            let norm = clip_grad_norm(&mut tensors, train.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient norm at step {step}")));
            }
            let progress = step as f32 / total as f32;
            adam.config.lr = train.lr * (1.0 - (1.0 - train.final_lr_frac) * progress);
            adam.step(&mut tensors)?;
            for t in tensors.iter_mut() {
                t.clear_grad();
            }
            report.step_losses.push(value);
            sum += value as f64;
            count += 1;
            step += 1;
        }
        report.epoch_losses.push((sum / count.max(1) as f64) as f32);
    }
    Ok((params, report))
}
