//! Finite-difference validation of tape gradients.
//!
//! The analytic gradient comes from an `f32` tape (the code path used for
//! training); the central differences are evaluated on an `f64` tape so that
//! rounding in the function value does not swamp the comparison.

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued function that can be recorded on tapes of any precision.
pub trait ScalarFn {
    fn eval<'t, S: Element>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(|analytic|, |numeric|, floor),
    /// where `floor` is 1% of the largest numeric gradient magnitude (at least 1e-8).
    /// Without the floor, coordinates that cancel to near zero measure f32 rounding
    /// rather than the backward formulas.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates whose one-sided differences disagree (non-differentiable points).
    pub excluded: Vec<usize>,
    pub checked: usize,
}

fn eval_f64<F: ScalarFn>(f: &F, shape: &[usize], x: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let v = tape.values(shape.to_vec(), x.to_vec(), true)?;
    let out = f.eval(&tape, v)?;
    if out.len() != 1 {
        return Err(NnError::Invalid("grad_check needs a scalar function".into()));
    }
    let y = out.item();
    if !y.is_finite() {
        return Err(NnError::NonFinite(format!("function value {y}")));
    }
    Ok(y)
}

fn one_sided_gap(fp: f64, f0: f64, fm: f64, eps: f64) -> f64 {
    ((fp - f0) / eps - (f0 - fm) / eps).abs()
}

/// Analytic-versus-numeric gradient comparison at `x` with step `eps`.
pub fn grad_check<F: ScalarFn>(f: &F, x: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NnError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let tape = Tape::<f32>::new();
    let xv = tape.param(x);
    let out = f.eval(&tape, xv)?;
    if out.len() != 1 {
        return Err(NnError::Invalid("grad_check needs a scalar function".into()));
    }
    if !out.item().is_finite() {
        return Err(NnError::NonFinite(format!("function value {}", out.item())));
    }
    let analytic = tape.backward(out, None)?.wrt(xv).ok_or(NnError::Detached)?;

    let base: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    let f0 = eval_f64(f, x.shape(), &base)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        excluded: Vec::new(),
        checked: 0,
    };
    let mut probe = base.clone();
    let mut numerics = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let fp = eval_f64(f, x.shape(), &probe)?;
        probe[i] = base[i] - eps;
        let fm = eval_f64(f, x.shape(), &probe)?;
        probe[i] = base[i];
        let central = (fp - fm) / (2.0 * eps);
        let gap = one_sided_gap(fp, f0, fm, eps);
        if gap > 1e-9 && gap > 1e-3 * ((fp - f0) / eps).abs().max(((f0 - fm) / eps).abs()) {
            // possibly a kink inside the step: compare with the half step
            let h = eps / 2.0;
            probe[i] = base[i] + h;
            let hp = eval_f64(f, x.shape(), &probe)?;
            probe[i] = base[i] - h;
            let hm = eval_f64(f, x.shape(), &probe)?;
            probe[i] = base[i];
            let half_gap = one_sided_gap(hp, f0, hm, h);
            let half_central = (hp - hm) / (2.0 * h);
            if half_gap > 0.75 * gap {
                // smooth functions halve the gap with the step; a kink at x keeps it
                report.excluded.push(i);
            } else if (central - half_central).abs() <= 0.01 * gap {
                // smooth: the two differences agree to O(eps²), a kink inside
                // the step moves them apart by a fraction of the gap
                numerics.push((i, central));
            } else if half_gap <= 1e-3 * ((hp - f0) / h).abs().max(((f0 - hm) / h).abs()) {
                // the kink lies between the two steps; the half step is clear of it
                numerics.push((i, half_central));
            } else {
                report.excluded.push(i);
            }
            continue;
        }
        numerics.push((i, central));
    }
    let floor = numerics
        .iter()
        .fold(0.0f64, |m, &(_, n)| m.max(n.abs()))
        .max(1e-6)
        * 0.01;
    for (i, numeric) in numerics {
        let a = f64::from(analytic[i]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
