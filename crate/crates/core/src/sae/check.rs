//! Finite-difference checks of the SAE losses with respect to every
//! parameter, on small random instances.

use std::rc::Rc;

use polylens_nn::op_suite::{random_tensor, SuiteResult, EPS};
use polylens_nn::rng::stream;
use polylens_nn::{grad_check, Element, ScalarFn, Tape, Tensor, Var};

use super::{loss_gated_frozen, loss_standard};
use crate::error::Result;

const N: usize = 3;
const M: usize = 4;
const BATCH: usize = 2;
const LAMBDA: f64 = 0.5;

/// Which loss a check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Standard,
    StandardSquared,
    Gated,
}

impl LossKind {
    fn shapes(self) -> &'static [&'static [usize]] {
        match self {
            Self::Standard | Self::StandardSquared => &[&[M, N], &[M], &[N, M], &[N]],
            Self::Gated => &[&[M, N], &[M], &[M, N], &[M], &[N, M], &[N]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard_loss",
            Self::StandardSquared => "standard_loss_squared",
            Self::Gated => "gated_loss",
        }
    }
}

/// The loss as a function of all parameters flattened into one vector. The
/// gated loss reads its frozen decoder and bias from `frozen`, fixed at the
/// point being checked.
struct FlatLoss {
    kind: LossKind,
    x: Tensor,
    frozen: Vec<f32>,
}

fn slices<'t, S: Element>(p: Var<'t, S>, shapes: &[&[usize]]) -> polylens_nn::Result<Vec<Var<'t, S>>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut start = 0u32;
    for shape in shapes {
        let len: usize = shape.iter().product();
        let idx: Rc<[u32]> = (start..start + len as u32).collect();
        out.push(p.gather(idx, shape.to_vec())?);
        start += len as u32;
    }
    Ok(out)
}

impl ScalarFn for FlatLoss {
    fn eval<'t, S: Element>(&self, tape: &'t Tape<S>, p: Var<'t, S>) -> polylens_nn::Result<Var<'t, S>> {
        let x = tape.constant(&self.x);
        let v = slices(p, self.kind.shapes())?;
        let terms = match self.kind {
            LossKind::Standard | LossKind::StandardSquared => {
                loss_standard(x, v[0], v[1], v[2], v[3], LAMBDA, self.kind == LossKind::StandardSquared)
            }
            LossKind::Gated => {
                let w_d_frozen = tape.constant(&Tensor::new([N, M], self.frozen[..N * M].to_vec())?);
                let b_d_frozen = tape.constant(&Tensor::new([N], self.frozen[N * M..].to_vec())?);
                loss_gated_frozen(x, v[0], v[1], v[2], v[3], v[4], v[5], w_d_frozen, b_d_frozen, LAMBDA)
            }
        };
        terms.map(|t| t.total).map_err(|e| polylens_nn::NnError::Invalid(e.to_string()))
    }
}

/// Worst relative error over `instances` random parameter draws.
pub fn loss_gradcheck(kind: LossKind, instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = stream(seed, kind.name());
    let len: usize = kind.shapes().iter().map(|s| s.iter().product::<usize>()).sum();
    let mut worst = 0.0f64;
    let mut excluded = 0;
    for _ in 0..instances {
        let params = random_tensor(&mut rng, &[len]);
        let x = random_tensor(&mut rng, &[BATCH, N]);
        let frozen = params.data()[len - N * M - N..].to_vec();
        let report = grad_check(&FlatLoss { kind, x, frozen }, &params, EPS)?;
        worst = worst.max(report.max_rel_error);
        excluded += report.excluded.len();
    }
    Ok(SuiteResult {
        name: kind.name().to_owned(),
        instances,
        max_rel_error: worst,
        excluded,
    })
}
