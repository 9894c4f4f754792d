use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Learning rate ramps linearly from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate used at 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f32 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * step as f32 / w as f32
        }
    }

    /// Applies one update from each tensor's `grad` (missing grads count as
    /// zero). If any gradient is non-finite nothing is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!(
                        "gradient of parameter {i} (shape {:?}) at flat index {j} is {}",
                        p.shape(),
                        g[j]
                    )));
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(NnError::Invalid(
                "parameter list changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr = self.lr_at(self.step);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f32) -> f32 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
