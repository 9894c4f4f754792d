//! Standard and gated sparse autoencoders over residual vectors.
//!
//! Shapes follow the column convention: encoders are `[m×n]`, the decoder is
//! `[n×m]` with unit-norm columns, one column per feature.

mod check;
mod eval;
mod train;

use std::path::Path;

use polylens_nn::{checkpoint, Element, Tensor, Var};
use polylens_nn::rng::{normal_tensor, stream};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use check::{loss_gradcheck, LossKind};
pub use eval::{loss_recovered, loss_recovered_with, max_feature_activations, LossRecovered, MaxActivationTable};
pub use train::{train_sae, SaeTrainConfig, SaeTrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeVariant {
    Standard,
    Gated,
}

impl std::str::FromStr for SaeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "gated" => Ok(Self::Gated),
            _ => Err(invalid(format!("unknown SAE variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardSaeParams {
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub w_d: Tensor,
    pub b_d: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedSaeParams {
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub w_mag: Tensor,
    pub b_mag: Tensor,
    pub w_d: Tensor,
    pub b_d: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SaeParams {
    Standard(StandardSaeParams),
    Gated(GatedSaeParams),
}

/// Sparse feature vector: `(feature id, activation)` for active features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureActivations {
    pub m: usize,
    pub entries: Vec<(u32, f32)>,
}

impl FeatureActivations {
    pub fn from_dense(f: &[f32]) -> Self {
        Self {
            m: f.len(),
            entries: f.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i as u32, v)).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.m];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// Reconstruction, error term and features of one vector.
///
/// The error is kept in `f64`: the difference of two `f32` values is exact
/// there, so [`recompose`] gives back `x` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeDecomposition {
    pub x_hat: Vec<f32>,
    pub error: Vec<f64>,
    pub features: Vec<f32>,
}

/// `x̂ + ε`, rounded once to `f32`.
pub fn recompose(x_hat: &[f32], error: &[f64]) -> Vec<f32> {
    x_hat.iter().zip(error).map(|(&a, &e)| (a as f64 + e) as f32).collect()
}

fn unit_columns(rng: &mut impl rand::Rng, n: usize, m: usize) -> Tensor {
    let mut w = normal_tensor(rng, [n, m], 1.0);
    normalize_columns(&mut w).expect("gaussian columns are nonzero");
    w
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("matrix");
    let d = t.data();
    let data = (0..c * r).map(|k| d[(k % r) * c + k / r]).collect();
    Tensor::new([c, r], data).expect("same size")
}

/// Rescales every column of an `[n×m]` matrix to unit L2 norm.
pub fn normalize_columns(w: &mut Tensor) -> Result<()> {
    let (n, m) = w.dims2()?;
    let norms = column_norms(w);
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(invalid(format!("decoder column {i} is zero")));
    }
    let d = w.data_mut();
    for r in 0..n {
        for (c, &norm) in norms.iter().enumerate() {
            d[r * m + c] = (d[r * m + c] as f64 / norm) as f32;
        }
    }
    Ok(())
}

pub fn column_norms(w: &Tensor) -> Vec<f64> {
    let (n, m) = w.dims2().expect("matrix");
    let d = w.data();
    (0..m).map(|c| (0..n).map(|r| (d[r * m + c] as f64).powi(2)).sum::<f64>().sqrt()).collect()
}

/// `y[B×out] = x[B×in] · wᵀ` for `w: [out×in]`, plus a row bias.
fn affine_t(x: &[f32], rows: usize, w: &Tensor, bias: &[f32]) -> Vec<f32> {
    let (out, inp) = w.dims2().expect("matrix");
    let mut y = vec![0.0f32; rows * out];
    f32::gemm(rows, inp, out, x, false, w.data(), true, &mut y, false);
    for row in y.chunks_mut(out) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

impl SaeParams {
    /// Random unit decoder columns, encoders tied to the decoder transpose,
    /// zero biases. `b_d` is set from data by the trainer.
    pub fn init(variant: SaeVariant, n: usize, m: usize, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(invalid("SAE dimensions must be positive"));
        }
        let mut rng = stream(seed, "sae-init");
        let w_d = unit_columns(&mut rng, n, m);
        let w_t = transpose(&w_d);
        Ok(match variant {
            SaeVariant::Standard => Self::Standard(StandardSaeParams {
                w_e: w_t,
                b_e: Tensor::zeros([m]),
                w_d,
                b_d: Tensor::zeros([n]),
            }),
            SaeVariant::Gated => Self::Gated(GatedSaeParams {
                w_gate: w_t.clone(),
                b_gate: Tensor::zeros([m]),
                w_mag: w_t,
                b_mag: Tensor::zeros([m]),
                w_d,
                b_d: Tensor::zeros([n]),
            }),
        })
    }

    pub fn variant(&self) -> SaeVariant {
        match self {
            Self::Standard(_) => SaeVariant::Standard,
            Self::Gated(_) => SaeVariant::Gated,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_d().shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.w_d().shape()[1]
    }

    pub fn w_d(&self) -> &Tensor {
        match self {
            Self::Standard(p) => &p.w_d,
            Self::Gated(p) => &p.w_d,
        }
    }

    pub fn b_d(&self) -> &Tensor {
        match self {
            Self::Standard(p) => &p.b_d,
            Self::Gated(p) => &p.b_d,
        }
    }

    /// Column `i` of the decoder.
    pub fn direction(&self, i: usize) -> Vec<f32> {
        let (n, m) = (self.d_model(), self.num_features());
        (0..n).map(|r| self.w_d().data()[r * m + i]).collect()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Standard(p) => vec![("w_e", &p.w_e), ("b_e", &p.b_e), ("w_d", &p.w_d), ("b_d", &p.b_d)],
            Self::Gated(p) => vec![
                ("w_gate", &p.w_gate),
                ("b_gate", &p.b_gate),
                ("w_mag", &p.w_mag),
                ("b_mag", &p.b_mag),
                ("w_d", &p.w_d),
                ("b_d", &p.b_d),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Standard(p) => vec![&mut p.w_e, &mut p.b_e, &mut p.w_d, &mut p.b_d],
            Self::Gated(p) => vec![&mut p.w_gate, &mut p.b_gate, &mut p.w_mag, &mut p.b_mag, &mut p.w_d, &mut p.b_d],
        }
    }

    fn check_rows(&self, x: &[f32]) -> Result<usize> {
        let n = self.d_model();
        if !x.len().is_multiple_of(n) {
            return Err(invalid(format!("input of length {} is not a multiple of d_model {n}", x.len())));
        }
        Ok(x.len() / n)
    }

    /// Dense feature activations for a row-major batch `[B×n]`.
    pub fn encode_batch(&self, x: &[f32]) -> Result<Vec<f32>> {
        let rows = self.check_rows(x)?;
        let n = self.d_model();
        let centred: Vec<f32> = x.iter().enumerate().map(|(i, &v)| v - self.b_d().data()[i % n]).collect();
        Ok(match self {
            Self::Standard(p) => {
                let mut f = affine_t(&centred, rows, &p.w_e, p.b_e.data());
                f.iter_mut().for_each(|v| *v = v.max(0.0));
                f
            }
            Self::Gated(p) => {
                let gate = affine_t(&centred, rows, &p.w_gate, p.b_gate.data());
                let mut f = affine_t(&centred, rows, &p.w_mag, p.b_mag.data());
                for (v, g) in f.iter_mut().zip(&gate) {
                    *v = if *g > 0.0 { v.max(0.0) } else { 0.0 };
                }
                f
            }
        })
    }

    /// `x̂ = W_d f + b_d` for a row-major batch `[B×m]`.
    pub fn decode_batch(&self, f: &[f32]) -> Result<Vec<f32>> {
        let m = self.num_features();
        if !f.len().is_multiple_of(m) {
            return Err(invalid(format!("feature vector of length {} is not a multiple of {m}", f.len())));
        }
        Ok(affine_t(f, f.len() / m, self.w_d(), self.b_d().data()))
    }

    pub fn encode(&self, x: &[f32]) -> Result<FeatureActivations> {
        if x.len() != self.d_model() {
            return Err(invalid(format!("expected {} inputs, got {}", self.d_model(), x.len())));
        }
        Ok(FeatureActivations::from_dense(&self.encode_batch(x)?))
    }

    pub fn decode(&self, f: &FeatureActivations) -> Result<Vec<f32>> {
        if f.m != self.num_features() {
            return Err(invalid(format!("expected {} features, got {}", self.num_features(), f.m)));
        }
        self.decode_batch(&f.to_dense())
    }

    /// Features, reconstruction and the error term `x − x̂`.
    pub fn decompose(&self, x: &[f32]) -> Result<SaeDecomposition> {
        if x.len() != self.d_model() {
            return Err(invalid(format!("expected {} inputs, got {}", self.d_model(), x.len())));
        }
        let features = self.encode_batch(x)?;
        let x_hat = self.decode_batch(&features)?;
        let error = x.iter().zip(&x_hat).map(|(&a, &b)| a as f64 - b as f64).collect();
        Ok(SaeDecomposition { x_hat, error, features })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let kind = Tensor::scalar(match self.variant() {
            SaeVariant::Standard => 0.0,
            SaeVariant::Gated => 1.0,
        });
        let mut list = vec![("variant", &kind)];
        list.extend(self.named());
        checkpoint::save(path, &list)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut t = checkpoint::load(path)?;
        let variant = match checkpoint::take(&mut t, "variant")?.data() {
            [v] if *v == 0.0 => SaeVariant::Standard,
            [v] if *v == 1.0 => SaeVariant::Gated,
            other => return Err(Error::Format(format!("unknown SAE variant tag {other:?}"))),
        };
        let w_d = checkpoint::take(&mut t, "w_d")?;
        let (n, m) = w_d.dims2()?;
        let b_d = checkpoint::take(&mut t, "b_d")?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let x = checkpoint::take(&mut t, name)?;
            if x.shape() != shape {
                return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", x.shape())));
            }
            Ok(x)
        };
        if b_d.shape() != [n] {
            return Err(Error::Format(format!("b_d has shape {:?}, expected [{n}]", b_d.shape())));
        }
        Ok(match variant {
            SaeVariant::Standard => Self::Standard(StandardSaeParams {
                w_e: take("w_e", &[m, n])?,
                b_e: take("b_e", &[m])?,
                w_d,
                b_d,
            }),
            SaeVariant::Gated => Self::Gated(GatedSaeParams {
                w_gate: take("w_gate", &[m, n])?,
                b_gate: take("b_gate", &[m])?,
                w_mag: take("w_mag", &[m, n])?,
                b_mag: take("b_mag", &[m])?,
                w_d,
                b_d,
            }),
        })
    }
}

/// Loss terms recorded on a tape. `total` is their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t, S: Element = f32> {
    pub total: Var<'t, S>,
    pub reconstruction: Var<'t, S>,
    pub sparsity: Var<'t, S>,
    /// Gated only: reconstruction of `ReLU(π_gate)` through the frozen decoder.
    pub auxiliary: Option<Var<'t, S>>,
}

fn squared_rows<'t, S: Element>(d: Var<'t, S>) -> Result<Var<'t, S>> {
    Ok(d.mul(d)?.sum())
}

/// `mean_B(‖x − x̂‖ + λ‖f‖₁)`; with `squared`, the reconstruction term is
/// `‖x − x̂‖²` instead.
pub fn loss_standard<'t, S: Element>(
    x: Var<'t, S>,
    w_e: Var<'t, S>,
    b_e: Var<'t, S>,
    w_d: Var<'t, S>,
    b_d: Var<'t, S>,
    lambda: f64,
    squared: bool,
) -> Result<LossTerms<'t, S>> {
    let rows = x.shape()[0];
    if rows == 0 {
        return Err(invalid("empty batch"));
    }
    let inv = S::of(1.0 / rows as f64);
    let f = x.sub_row(b_d)?.matmul_t(w_e)?.add_row(b_e)?.relu();
    let diff = x.sub(f.matmul_t(w_d)?.add_row(b_d)?)?;
    let reconstruction = if squared { squared_rows(diff)? } else { diff.row_norms()?.sum() }.scale(inv);
    let sparsity = f.sum().scale(S::of(lambda) * inv);
    Ok(LossTerms {
        total: reconstruction.add(sparsity)?,
        reconstruction,
        sparsity,
        auxiliary: None,
    })
}

/// Three-term gated objective averaged over the batch. The magnitude path,
/// decoder and `b_d` are trained by the reconstruction term only; the gate
/// path sees `b_d` and the decoder as constants.
#[allow(clippy::too_many_arguments)]
pub fn loss_gated<'t, S: Element>(
    x: Var<'t, S>,
    w_gate: Var<'t, S>,
    b_gate: Var<'t, S>,
    w_mag: Var<'t, S>,
    b_mag: Var<'t, S>,
    w_d: Var<'t, S>,
    b_d: Var<'t, S>,
    lambda: f64,
) -> Result<LossTerms<'t, S>> {
    loss_gated_frozen(x, w_gate, b_gate, w_mag, b_mag, w_d, b_d, w_d.detach(), b_d.detach(), lambda)
}

/// [`loss_gated`] with the frozen decoder and bias supplied explicitly, so a
/// finite-difference check can hold them fixed while `w_d` and `b_d` move.
#[allow(clippy::too_many_arguments)]
pub fn loss_gated_frozen<'t, S: Element>(
    x: Var<'t, S>,
    w_gate: Var<'t, S>,
    b_gate: Var<'t, S>,
    w_mag: Var<'t, S>,
    b_mag: Var<'t, S>,
    w_d: Var<'t, S>,
    b_d: Var<'t, S>,
    w_d_frozen: Var<'t, S>,
    b_d_frozen: Var<'t, S>,
    lambda: f64,
) -> Result<LossTerms<'t, S>> {
    let rows = x.shape()[0];
    if rows == 0 {
        return Err(invalid("empty batch"));
    }
    let inv = S::of(1.0 / rows as f64);
    let pi_gate = x.sub_row(b_d_frozen)?.matmul_t(w_gate)?.add_row(b_gate)?;
    let mag = x.sub_row(b_d)?.matmul_t(w_mag)?.add_row(b_mag)?.relu();
    let f_tilde = pi_gate.heaviside().mul(mag)?;
    let reconstruction = squared_rows(x.sub(f_tilde.matmul_t(w_d)?.add_row(b_d)?)?)?.scale(inv);
    let gate_act = pi_gate.relu();
    let sparsity = gate_act.sum().scale(S::of(lambda) * inv);
    let auxiliary = squared_rows(x.sub(gate_act.matmul_t(w_d_frozen)?.add_row(b_d_frozen)?)?)?.scale(inv);
    Ok(LossTerms {
        total: reconstruction.add(sparsity)?.add(auxiliary)?,
        reconstruction,
        sparsity,
        auxiliary: Some(auxiliary),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use polylens_nn::Tape;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    // n = 2, m = 4; decoder columns e0, e1, (e0+e1)/√2, (e0−e1)/√2
    fn standard() -> SaeParams {
        let r = std::f32::consts::FRAC_1_SQRT_2;
        SaeParams::Standard(StandardSaeParams {
            w_e: t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]),
            b_e: t(&[4], &[0.0, -0.5, 0.0, -1.0]),
            w_d: t(&[2, 4], &[1.0, 0.0, r, r, 0.0, 1.0, r, -r]),
            b_d: t(&[2], &[0.5, -0.5]),
        })
    }

    fn gated(b_gate: [f32; 4], b_mag: [f32; 4]) -> SaeParams {
        let SaeParams::Standard(s) = standard() else { unreachable!() };
        SaeParams::Gated(GatedSaeParams {
            w_gate: Tensor::zeros([4, 2]),
            b_gate: t(&[4], &b_gate),
            w_mag: Tensor::zeros([4, 2]),
            b_mag: t(&[4], &b_mag),
            w_d: s.w_d,
            b_d: s.b_d,
        })
    }

    #[test]
    fn standard_encode_matches_hand_arithmetic() {
        // x − b_d = [1.5, 1.5]; pre = [1.5, 1.0, 3.0, −1.0]
        let f = standard().encode_batch(&[2.0, 1.0]).unwrap();
        assert_eq!(f, vec![1.5, 1.0, 3.0, 0.0]);
    }

    #[test]
    fn input_at_decoder_bias_gives_no_features() {
        let p = standard();
        let f = p.encode(p.b_d().data()).unwrap();
        assert!(f.entries.is_empty());
    }

    #[test]
    fn encoder_is_not_homogeneous() {
        let p = standard();
        let f1 = p.encode_batch(&[1.0, 0.0]).unwrap();
        let f2 = p.encode_batch(&[2.0, 0.0]).unwrap();
        let doubled: Vec<f32> = f1.iter().map(|v| 2.0 * v).collect();
        assert_ne!(f2, doubled);
    }

    #[test]
    fn closed_gate_zeroes_everything() {
        let p = gated([-1.0, 0.0, -2.0, -0.1], [5.0; 4]);
        assert_eq!(p.encode_batch(&[0.3, 0.7]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_open_gate() {
        let p = gated([-1.0, -1.0, -1.0, 1.0], [9.0, 9.0, 9.0, 2.5]);
        assert_eq!(p.encode(&[0.3, 0.7]).unwrap().entries, vec![(3, 2.5)]);
        let p = gated([-1.0, -1.0, -1.0, 1.0], [9.0, 9.0, 9.0, -2.5]);
        assert!(p.encode(&[0.3, 0.7]).unwrap().entries.is_empty());
    }

    #[test]
    fn decode_cases() {
        let p = standard();
        assert_eq!(p.decode_batch(&[0.0; 4]).unwrap(), vec![0.5, -0.5]);
        let x = p.decode_batch(&[0.0, 0.0, 2.0, 0.0]).unwrap();
        let col = p.direction(2);
        assert!((x[0] - (2.0 * col[0] + 0.5)).abs() < 1e-6);
        assert!((x[1] - (2.0 * col[1] - 0.5)).abs() < 1e-6);
        let f = [0.3, 1.2, 0.0, 2.0];
        let x = p.decode_batch(&f).unwrap();
        let w = p.w_d().data();
        for r in 0..2 {
            let want: f32 = (0..4).map(|c| w[r * 4 + c] * f[c]).sum::<f32>() + p.b_d().data()[r];
            assert!((x[r] - want).abs() < 1e-6);
        }
        assert!(p.decode_batch(&[1.0; 3]).is_err());
        assert!(p.encode(&[1.0; 3]).is_err());
    }

    #[test]
    fn decomposition_is_exact() {
        let p = standard();
        for x in [[2.0f32, 1.0], [-0.3, 0.9], [10.0, -4.0]] {
            let d = p.decompose(&x).unwrap();
            assert_eq!(recompose(&d.x_hat, &d.error), x);
        }
    }

    #[test]
    fn normalize_columns_cases() {
        let mut w = t(&[2, 1], &[3.0, 4.0]);
        normalize_columns(&mut w).unwrap();
        assert_eq!(w.data(), &[0.6, 0.8]);
        let p = standard();
        let mut w = p.w_d().clone();
        normalize_columns(&mut w).unwrap();
        for (a, b) in w.data().iter().zip(p.w_d().data()) {
            assert!((a - b).abs() < 1e-7);
        }
        let mut z = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(normalize_columns(&mut z).is_err());
    }

    fn standard_loss(p: &SaeParams, x: &[f32], rows: usize, lambda: f64) -> f32 {
        let SaeParams::Standard(s) = p else { unreachable!() };
        let tape = Tape::<f32>::new();
        let xv = tape.values([rows, 2], x.to_vec(), false).unwrap();
        let l = loss_standard(xv, tape.leaf(&s.w_e), tape.leaf(&s.b_e), tape.leaf(&s.w_d), tape.leaf(&s.b_d), lambda, false).unwrap();
        l.total.item()
    }

    #[test]
    fn standard_loss_cases() {
        let mut p = standard();
        // x = b_d: features zero and reconstruction exact
        assert_eq!(standard_loss(&p, &[0.5, -0.5], 1, 0.505), 0.0);
        if let SaeParams::Standard(s) = &mut p {
            s.b_d = Tensor::zeros([2]);
            s.b_e = Tensor::full([4], -100.0);
        }
        // x̂ = 0 and f = 0: mean of ‖x‖
        let got = standard_loss(&p, &[3.0, 4.0, 0.0, 1.0], 2, 0.505);
        assert!((got - 3.0).abs() < 1e-6);
        // hand batch: f rows [1.5,1,3,0] and [0.75,0,0,0.5]
        let p = standard();
        let x = [2.0, 1.0, 1.25, -1.25];
        let f = p.encode_batch(&x).unwrap();
        assert_eq!(f, vec![1.5, 1.0, 3.0, 0.0, 0.75, 0.0, 0.0, 0.5]);
        let xh = p.decode_batch(&f).unwrap();
        let err: f64 = (0..2)
            .map(|b| ((x[2 * b] - xh[2 * b]).powi(2) as f64 + (x[2 * b + 1] - xh[2 * b + 1]).powi(2) as f64).sqrt())
            .sum();
        let want = (err + 0.505 * 6.75) / 2.0;
        assert!((standard_loss(&p, &x, 2, 0.505) as f64 - want).abs() < 1e-5);
    }

    fn gated_terms(p: &GatedSaeParams, x: &[f32], lambda: f64) -> [f32; 3] {
        let tape = Tape::<f32>::new();
        let xv = tape.values([x.len() / 2, 2], x.to_vec(), false).unwrap();
        let l = loss_gated(
            xv,
            tape.leaf(&p.w_gate),
            tape.leaf(&p.b_gate),
            tape.leaf(&p.w_mag),
            tape.leaf(&p.b_mag),
            tape.leaf(&p.w_d),
            tape.leaf(&p.b_d),
            lambda,
        )
        .unwrap();
        [l.reconstruction.item(), l.sparsity.item(), l.auxiliary.unwrap().item()]
    }

    #[test]
    fn gated_loss_cases() {
        let SaeParams::Gated(p) = gated([-1.0; 4], [1.0; 4]) else { unreachable!() };
        assert_eq!(gated_terms(&p, &[0.5, -0.5], 0.505), [0.0; 3]);
        // one open feature: gate pre 0.8, magnitude 2.0, direction e0
        let SaeParams::Gated(p) = gated([0.8, -1.0, -1.0, -1.0], [2.0, 0.0, 0.0, 0.0]) else { unreachable!() };
        let x = [1.0, 1.0];
        // x̂ = 2·e0 + b_d = [2.5, −0.5]; frozen x̂ = 0.8·e0 + b_d = [1.3, −0.5]
        let want = [1.5f32 * 1.5 + 1.5 * 1.5, 0.505 * 0.8, 0.3 * 0.3 + 1.5 * 1.5];
        let got = gated_terms(&p, &x, 0.505);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-5, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn auxiliary_term_gives_decoder_no_gradient() {
        let mut rng = stream(5, "t");
        let p = GatedSaeParams {
            w_gate: normal_tensor(&mut rng, [4, 2], 1.0),
            b_gate: normal_tensor(&mut rng, [4], 1.0),
            w_mag: normal_tensor(&mut rng, [4, 2], 1.0),
            b_mag: normal_tensor(&mut rng, [4], 1.0),
            w_d: unit_columns(&mut rng, 2, 4),
            b_d: normal_tensor(&mut rng, [2], 1.0),
        };
        let x = normal_tensor(&mut rng, [8, 2], 2.0);
        let tape = Tape::<f32>::new();
        let vars = [&p.w_gate, &p.b_gate, &p.w_mag, &p.b_mag, &p.w_d, &p.b_d].map(|t| tape.param(t));
        let l = loss_gated(tape.constant(&x), vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], 0.505).unwrap();
        let aux = l.auxiliary.unwrap();
        assert!(aux.item() > 0.0);
        let g = tape.backward(aux, None).unwrap();
        assert!(g.wrt(vars[4]).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.wrt(vars[5]).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.wrt(vars[0]).unwrap().iter().any(|&v| v != 0.0));
        // and the reconstruction term never reaches the gate path
        let g = tape.backward(l.reconstruction, None).unwrap();
        assert!(g.wrt(vars[0]).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.wrt(vars[1]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for p in [standard(), gated([0.1, -0.2, 0.3, -0.4], [1.0, 2.0, 3.0, 4.0])] {
            let path = dir.path().join("sae.plns");
            p.save(&path).unwrap();
            assert_eq!(SaeParams::load(&path).unwrap(), p);
        }
    }

    #[test]
    fn init_has_unit_columns_and_tied_encoder() {
        let p = SaeParams::init(SaeVariant::Gated, 8, 64, 1).unwrap();
        assert!(column_norms(p.w_d()).iter().all(|n| (n - 1.0).abs() < 1e-6));
        let SaeParams::Gated(g) = &p else { unreachable!() };
        assert_eq!(g.w_gate, transpose(&g.w_d));
        assert_eq!(g.w_gate, g.w_mag);
    }
}
