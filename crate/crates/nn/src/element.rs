use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Scalar type a [`Tape`](crate::Tape) computes in.
///
/// Model state is always stored as `f32`; `f64` tapes exist so that the
/// numerical side of a gradient check is not dominated by rounding.
pub trait Element:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m×k]` and `op(b)` of shape `[k×n]`.
    /// `b_t` means `b` is stored as `[n×k]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // (row stride, col stride) of the logical [rows×cols] view
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this many multiply-adds the packing done by `matrixmultiply` costs
/// more than it saves (attention products on short sequences).
const SMALL_GEMM: usize = 8192;

#[allow(clippy::too_many_arguments)]
fn naive_gemm<S: Float>(m: usize, k: usize, n: usize, a: &[S], a_t: bool, b: &[S], b_t: bool, c: &mut [S], accumulate: bool) {
    let (rsa, csa) = strides(m, k, a_t);
    let (rsb, csb) = strides(k, n, b_t);
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + a[i * rsa as usize + p * csa as usize] * b[p * rsb as usize + j * csb as usize];
            }
            let dst = &mut c[i * n + j];
            *dst = if accumulate { *dst + acc } else { acc };
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                if m * k * n < SMALL_GEMM {
                    naive_gemm(m, k, n, a, a_t, b, b_t, c, accumulate);
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every strided access stays in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn of_f32(v: f32) -> Self {
                v as $t
            }

            fn as_f32(self) -> f32 {
                self as f32
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);
