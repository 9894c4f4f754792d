//! Every differentiable tape op against central differences, 100 random
//! instances each, plus checks of the checker itself.

use polylens_nn::op_suite::{check_all_ops, random_tensor, EPS};
use polylens_nn::rng::stream;
use polylens_nn::{grad_check, Element, Result, ScalarFn, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

#[test]
fn all_differentiable_ops() {
    for r in check_all_ops(INSTANCES, 2024).unwrap() {
        println!("{}: max rel error {:.2e}, excluded {}", r.name, r.max_rel_error, r.excluded);
        assert!(r.max_rel_error < TOL, "{}: {}", r.name, r.max_rel_error);
    }
}

fn consts<'t, S: Element>(tape: &'t Tape<S>, data: &[f32], shape: &[usize]) -> Var<'t, S> {
    tape.constant(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
}

struct Linear;
impl ScalarFn for Linear {
    fn eval<'t, S: Element>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = consts(tape, &[0.5, -2.0, 3.0], &[3]);
        Ok(x.mul(w)?.sum())
    }
}

struct SumSquares;
impl ScalarFn for SumSquares {
    fn eval<'t, S: Element>(&self, _tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(x.mul(x)?.sum())
    }
}

struct ReluSum;
impl ScalarFn for ReluSum {
    fn eval<'t, S: Element>(&self, _tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(x.relu().sum())
    }
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
    let r = grad_check(&Linear, &x, EPS).unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn sum_of_squares_random() {
    let mut rng = stream(5, "sumsq");
    for _ in 0..INSTANCES {
        let x = random_tensor(&mut rng, &[10]);
        assert!(grad_check(&SumSquares, &x, EPS).unwrap().max_rel_error < 1e-4);
    }
}

#[test]
fn relu_kink_is_excluded() {
    let x = Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap();
    let r = grad_check(&ReluSum, &x, EPS).unwrap();
    assert_eq!(r.excluded, vec![0]);
    assert_eq!(r.checked, 2);
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn kink_inside_step_uses_half_step() {
    // the kink at 0 sits 0.8 steps below x[0]: the full step straddles it, the half step does not
    let x = Tensor::new([2], vec![8e-4, 1.0]).unwrap();
    let r = grad_check(&ReluSum, &x, EPS).unwrap();
    assert!(r.excluded.is_empty());
    assert_eq!(r.checked, 2);
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn non_positive_eps_rejected() {
    let x = Tensor::zeros([2]);
    assert!(grad_check(&SumSquares, &x, 0.0).is_err());
}

#[test]
fn backward_is_deterministic() {
    let x = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let run = || {
        let tape = Tape::<f32>::new();
        let v = tape.param(&x);
        let z = v.matmul(v).unwrap().reshape([1, 2, 2]).unwrap().causal_softmax().unwrap().sum();
        let g = tape.backward(z, None).unwrap().wrt(v).unwrap();
        (z.item(), g)
    };
    assert_eq!(run(), run());
}
