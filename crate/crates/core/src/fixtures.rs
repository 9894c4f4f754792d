//! A hand-built model whose steering behaviour is known in closed form.
//!
//! One block with every weight zero is the identity on the residual, so the
//! logits are `LN(tok_emb[x])·tok_embᵀ`. After `BOS` the model emits `A`.
//! The single SAE feature decodes along `e_B − e_A`, so clamping it at the
//! last position flips the next token to `B`. The Number probe reads the
//! `A`/`B` axis and the Tense probe an orthogonal one.

use polylens_nn::Tensor;

use crate::corpus::BOS;
use crate::interventions::InterventionSpec;
use crate::lm::{LmParams, TransformerConfig};
use crate::probes::{ProbeMetrics, ProbeParams};
use crate::sae::{MaxActivationTable, SaeParams, StandardSaeParams};

pub const TOKEN_A: u32 = 4;
pub const TOKEN_B: u32 = 5;
pub const D: usize = 4;

pub struct SteeringFixture {
    pub lm: LmParams,
    pub sae: SaeParams,
    pub table: MaxActivationTable,
    /// `Number=Plur` then `Tense=Past`.
    pub probes: Vec<ProbeParams>,
    pub prompts: Vec<Vec<u32>>,
}

impl SteeringFixture {
    /// Clamp of the only feature at the last position.
    pub fn clamp(&self, multiplier: f32) -> InterventionSpec {
        InterventionSpec::clamp(0, multiplier, 0)
    }

    /// An intervention that changes nothing.
    pub fn no_op(&self) -> InterventionSpec {
        InterventionSpec::ablate(Vec::new(), 0)
    }
}

fn probe(concept: &str, value: &str, w: [f32; D], b: f32) -> ProbeParams {
    ProbeParams {
        concept: concept.into(),
        value: value.into(),
        language: "en".into(),
        w: w.to_vec(),
        b,
        metrics: ProbeMetrics {
            train_accuracy: 1.0,
            heldout_accuracy: 1.0,
            n_train: 0,
            n_heldout: 0,
            n_positive: 0,
            n_negative: 0,
            balanced: true,
            l2: 0.0,
            iterations: 0,
            grad_norm: 0.0,
        },
    }
}

pub fn steering_fixture() -> SteeringFixture {
    let config = TransformerConfig {
        d_model: D,
        n_layers: 1,
        n_heads: 1,
        d_ff: D,
        hook_layer: 0,
        ..TransformerConfig::new(6, 8)
    };
    let mut lm = LmParams::init(config, 0).expect("valid config");
    for block in &mut lm.blocks {
        for t in block.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        block.ln1_g.data_mut().fill(1.0);
        block.ln2_g.data_mut().fill(1.0);
    }
    lm.pos_emb.data_mut().fill(0.0);
    lm.lnf_g.data_mut().fill(1.0);
    lm.lnf_b.data_mut().fill(0.0);
    let mut emb = vec![0.0f32; 6 * D];
    emb[BOS as usize * D..][..D].copy_from_slice(&[0.1, -0.1, 0.1, -0.1]);
    emb[TOKEN_A as usize * D..][..D].copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
    emb[TOKEN_B as usize * D..][..D].copy_from_slice(&[-1.0, 1.0, 0.0, 0.0]);
    lm.tok_emb = Tensor::new([6, D], emb).expect("shape");

    let r = std::f32::consts::FRAC_1_SQRT_2;
    let sae = SaeParams::Standard(StandardSaeParams {
        w_e: Tensor::zeros([1, D]),
        b_e: Tensor::zeros([1]),
        w_d: Tensor::new([D, 1], vec![-r, r, 0.0, 0.0]).expect("shape"),
        b_d: Tensor::zeros([D]),
    });
    SteeringFixture {
        lm,
        sae,
        table: MaxActivationTable { max: vec![1.0], tokens: 1 },
        probes: vec![
            probe("Number", "Plur", [-1.0, 1.0, 0.0, 0.0], 0.0),
            probe("Tense", "Past", [0.0, 0.0, 1.0, -1.0], 0.5),
        ],
        prompts: (1..=4).map(|n| vec![BOS; n]).collect(),
    }
}
