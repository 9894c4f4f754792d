//! Gradient checks of every differentiable tape op on random instances.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::gradcheck::{grad_check, ScalarFn};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used by the suites.
pub const EPS: f64 = 1e-3;

/// Values in ±[0.05, 1.5), away from the ReLU and step kinks at zero.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn consts<'t, S: Element>(tape: &'t Tape<S>, data: &[f32], shape: &[usize]) -> Var<'t, S> {
    tape.constant(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
}

/// Random linear read-out so that every output coordinate matters.
fn readout<'t, S: Element>(v: Var<'t, S>, weights: &[f32]) -> Result<Var<'t, S>> {
    let w = consts(v.tape(), &weights[..v.len()], &v.shape());
    Ok(v.mul(w)?.sum())
}

macro_rules! case {
    ($name:ident, |$tape:ident, $x:ident, $w:ident, $c:ident| $body:expr) => {
        struct $name {
            c: Vec<f32>,
            w: Vec<f32>,
        }
        impl ScalarFn for $name {
            fn eval<'t, S: Element>(&self, $tape: &'t Tape<S>, $x: Var<'t, S>) -> Result<Var<'t, S>> {
                let $w = &self.w;
                let $c = &self.c;
                $body
            }
        }
    };
}

case!(MatMulLhs, |tape, x, w, c| {
    let b = consts(tape, &c[..12], &[3, 4]);
    readout(x.reshape([2, 3])?.matmul(b)?, w)
});
case!(MatMulRhs, |tape, x, w, c| {
    let a = consts(tape, &c[..6], &[2, 3]);
    readout(a.matmul(x.reshape([3, 2])?)?, w)
});
case!(MatMulT, |tape, x, w, c| {
    let a = consts(tape, &c[..6], &[2, 3]);
    let lhs = x.reshape([2, 3])?;
    readout(lhs.matmul_t(a)?.add(a.matmul_t(lhs)?)?, w)
});
case!(Bmm, |tape, x, w, c| {
    let b = consts(tape, &c[..12], &[2, 3, 2]);
    let a = x.reshape([2, 2, 3])?;
    let ab = a.bmm(b)?;
    readout(ab, w)?.add(readout(b.bmm_t(ab)?, &w[8..])?)
});
case!(AddSubMul, |tape, x, w, c| {
    let k = consts(tape, &c[..6], &[6]);
    let s = tape.scalar(S::of(0.7));
    readout(x.add(k)?.mul(x.sub(k)?)?.mul(s)?.add(x.mul(s)?)?, w)
});
case!(RowBias, |tape, x, w, c| {
    let m = consts(tape, &c[..6], &[2, 3]);
    let b = x.reshape([3])?;
    readout(m.add_row(b)?.mul(m.sub_row(b)?)?, w)
});
case!(ReluSigmoid, |_tape, x, w, _c| {
    readout(x.relu().add(x.sigmoid())?.mul(x)?, w)
});
case!(Reductions, |_tape, x, w, _c| {
    let m = x.reshape([2, 3])?;
    let cols = m.sum_rows()?;
    let norms = m.row_norms()?;
    readout(cols, w)?.add(readout(norms, &w[3..])?)?.add(x.mean())
});
case!(GatherOp, |_tape, x, w, _c| {
    let map: Rc<[u32]> = Rc::from(vec![5u32, 0, 0, 3, 2, 2, 1]);
    let rows = x.reshape([3, 2])?.gather_rows(&[2, 0, 2])?;
    readout(x.gather(map, [7])?, w)?.add(readout(rows, &w[7..])?)
});
case!(LayerNormInput, |tape, x, w, c| {
    let gain = consts(tape, &c[..8], &[8]);
    let bias = consts(tape, &c[8..16], &[8]);
    readout(x.reshape([2, 8])?.layer_norm(gain, bias, 1e-5)?, w)
});
case!(LayerNormParams, |tape, x, w, c| {
    let m = consts(tape, &c[..6], &[2, 3]);
    let gain = x.gather(Rc::from(vec![0u32, 1, 2]), [3])?;
    let bias = x.gather(Rc::from(vec![3u32, 4, 5]), [3])?;
    readout(m.layer_norm(gain, bias, 1e-5)?, w)
});
case!(Softmax, |_tape, x, w, _c| {
    readout(x.reshape([2, 3, 3])?.causal_softmax()?, w)
});
case!(CrossEntropyOp, |_tape, x, _w, _c| {
    let targets: Rc<[Option<u32>]> = Rc::from(vec![Some(2), None, Some(0)]);
    x.reshape([3, 4])?.cross_entropy(targets)
});

/// Worst result over the random instances of one check.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub excluded: usize,
}

/// Runs `instances` random checks of `make(constants, weights)` at inputs of
/// `shape`.
pub fn check_random<F: ScalarFn>(
    name: &str,
    shape: &[usize],
    instances: usize,
    seed: u64,
    make: impl Fn(Vec<f32>, Vec<f32>) -> F,
) -> Result<SuiteResult> {
    let mut rng = stream(seed, name);
    let mut worst = 0.0f64;
    let mut excluded = 0;
    for _ in 0..instances {
        let x = random_tensor(&mut rng, shape);
        let c = random_tensor(&mut rng, &[32]).into_data();
        let w = random_tensor(&mut rng, &[32]).into_data();
        let report = grad_check(&make(c, w), &x, EPS)?;
        worst = worst.max(report.max_rel_error);
        excluded += report.excluded.len();
    }
    Ok(SuiteResult {
        name: name.to_owned(),
        instances,
        max_rel_error: worst,
        excluded,
    })
}

/// One result per differentiable op.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        check_random("matmul_lhs", &[6], instances, seed, |c, w| MatMulLhs { c, w })?,
        check_random("matmul_rhs", &[6], instances, seed, |c, w| MatMulRhs { c, w })?,
        check_random("matmul_t", &[6], instances, seed, |c, w| MatMulT { c, w })?,
        check_random("bmm", &[12], instances, seed, |c, w| Bmm { c, w })?,
        check_random("add_sub_mul", &[6], instances, seed, |c, w| AddSubMul { c, w })?,
        check_random("row_bias", &[3], instances, seed, |c, w| RowBias { c, w })?,
        check_random("relu_sigmoid", &[8], instances, seed, |c, w| ReluSigmoid { c, w })?,
        check_random("reductions", &[6], instances, seed, |c, w| Reductions { c, w })?,
        check_random("gather", &[6], instances, seed, |c, w| GatherOp { c, w })?,
        check_random("layer_norm_input", &[16], instances, seed, |c, w| LayerNormInput { c, w })?,
        check_random("layer_norm_params", &[6], instances, seed, |c, w| LayerNormParams { c, w })?,
        check_random("causal_softmax", &[18], instances, seed, |c, w| Softmax { c, w })?,
        check_random("cross_entropy", &[12], instances, seed, |c, w| CrossEntropyOp { c, w })?,
    ])
}
