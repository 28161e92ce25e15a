use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type for tensors and tapes.
///
/// Networks run in `f32`; `f64` instantiations of the same code serve as
/// the shadow evaluation for finite-difference checks. Reductions always
/// accumulate in `f64` regardless of the storage type.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b (+ c if accumulate)` with explicit strides, row/col style.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(c.len() >= m * n);
        if k == 0 {
            if !accumulate {
                c[..m * n].iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: callers in this module pass slices whose extents cover every
        // index reachable through the given dims and strides.
        unsafe {
            matrixmultiply::sgemm(
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
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(c.len() >= m * n);
        if k == 0 {
            if !accumulate {
                c[..m * n].iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
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
}

/// Row-major matrix product helper.
///
/// `a` is `[m,k]` (or `[k,m]` when `trans_a`), `b` is `[k,n]` (or `[n,k]`
/// when `trans_b`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}
