use serde::{Deserialize, Serialize};

use super::SaeParams;
use crate::error::{invalid, Result};
use crate::lm::{ActivationCache, HookScope, InterventionHook, LmParams};

/// Per-feature maximum activation over a profiling set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxActivationTable {
    pub max: Vec<f32>,
    pub tokens: usize,
}

impl MaxActivationTable {
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.max.len() != other.max.len() {
            return Err(invalid("max tables of different width"));
        }
        Ok(Self {
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
            tokens: self.tokens + other.tokens,
        })
    }
}

pub fn max_feature_activations(sae: &SaeParams, cache: &ActivationCache) -> Result<MaxActivationTable> {
    let m = sae.num_features();
    let mut max = vec![0.0f32; m];
    for r in &cache.records {
        let f = sae.encode_batch(r.acts.data())?;
        for row in f.chunks(m) {
            max.iter_mut().zip(row).for_each(|(a, &v)| *a = a.max(v));
        }
    }
    Ok(MaxActivationTable {
        max,
        tokens: cache.num_tokens(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecovered {
    pub original: f64,
    pub zero: f64,
    pub reconstructed: f64,
    pub fraction: f64,
}

/// Fraction of next-token loss recovered when the residual at `layer` is
/// replaced by its SAE reconstruction, relative to zeroing it.
pub fn loss_recovered(lm: &LmParams, sae: &SaeParams, seqs: &[Vec<u32>], layer: usize, batch_size: usize) -> Result<LossRecovered> {
    if sae.d_model() != lm.config.d_model {
        return Err(invalid("SAE and LM widths differ"));
    }
    loss_recovered_with(lm, seqs, layer, batch_size, &|x: &[f32]| {
        sae.decode_batch(&sae.encode_batch(x).expect("width checked")).expect("width checked")
    })
}

/// As [`loss_recovered`] with an arbitrary reconstruction map.
pub fn loss_recovered_with(
    lm: &LmParams,
    seqs: &[Vec<u32>],
    layer: usize,
    batch_size: usize,
    reconstruct: &dyn Fn(&[f32]) -> Vec<f32>,
) -> Result<LossRecovered> {
    if seqs.is_empty() {
        return Err(invalid("empty evaluation corpus"));
    }
    let zero = |x: &[f32]| vec![0.0; x.len()];
    let zero_hook = InterventionHook {
        layer,
        scope: HookScope::All,
        transform: &zero,
    };
    let recon_hook = InterventionHook {
        layer,
        scope: HookScope::All,
        transform: reconstruct,
    };
    let original = lm.loss(seqs, batch_size, None)?;
    let zero_loss = lm.loss(seqs, batch_size, Some(&zero_hook))?;
    let reconstructed = lm.loss(seqs, batch_size, Some(&recon_hook))?;
    if (zero_loss - original).abs() < 1e-12 {
        return Err(invalid(format!("zeroing layer {layer} does not change the loss")));
    }
    Ok(LossRecovered {
        original,
        zero: zero_loss,
        reconstructed,
        fraction: (reconstructed - zero_loss) / (original - zero_loss),
    })
}
