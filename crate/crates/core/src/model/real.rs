//! Scalar abstraction so the network runs in `f32` for training and
//! inference, and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A B + beta * C` on strided matrices.
    ///
    /// # Safety
    /// Every index `i*rs + j*cs` reachable from the given dimensions must lie
    /// inside the corresponding slice; [`gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix view: `(offset, row stride, column stride)` into a slice.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn rows(offset: usize, rs: usize) -> View {
        View { offset, rs, cs: 1 }
    }

    /// Transposed view of a row-major matrix with row stride `rs`.
    pub const fn transposed(offset: usize, rs: usize) -> View {
        View { offset, rs: 1, cs: rs }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// Bounds-checked strided GEMM: `C[m×n] = alpha A[m×k] B[k×n] + beta C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.extent(m, k) <= a.len(), "gemm: A out of bounds");
    assert!(vb.extent(k, n) <= b.len(), "gemm: B out of bounds");
    assert!(vc.extent(m, n) <= c.len(), "gemm: C out of bounds");
    // SAFETY: extents checked above; C does not alias A or B (distinct borrows).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Row-major `out[m×n] (+)= a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(m, k, n, T::one(), a, View::rows(0, k), b, View::rows(0, n), beta, out, View::rows(0, n));
}

/// `out[k×n] += aᵀ · b` with `a` row-major `m×k` and `b` row-major `m×n`.
pub fn matmul_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    gemm(k, m, n, T::one(), a, View::transposed(0, k), b, View::rows(0, n), T::one(), out, View::rows(0, n));
}

/// `out[m×k] (+)= a · wᵀ` with `a` row-major `m×n` and `w` row-major `k×n`.
pub fn matmul_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], w: &[T], out: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(m, n, k, T::one(), a, View::rows(0, n), w, View::transposed(0, n), beta, out, View::rows(0, k));
}
