//! Floating-point element types and the dense matrix products built on them.
//!
//! Training runs in `f32`; gradient checks run in `f64`. Every numeric routine
//! in the crate is generic over [`Element`].

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// On-disk / ledger identity of an element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Element:
    Float
    + Copy
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Strided general matrix product `c <- alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
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

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn bytes(len: usize) -> usize {
        len * Self::DTYPE.size()
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

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

    fn of_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

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

    fn of_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major matrix view with an explicit row stride, used for per-head slices.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a, T: Element> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, row_stride: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * row_stride + cols <= data.len(),
                "matrix view {rows}x{cols} (stride {row_stride}) exceeds buffer of {}",
                data.len()
            );
        }
        MatRef { data, rows, cols, row_stride }
    }

    /// The transposed view (no copy).
    fn parts(&self, transpose: bool) -> (usize, usize, isize, isize) {
        if transpose {
            (self.cols, self.rows, 1, self.row_stride as isize)
        } else {
            (self.rows, self.cols, self.row_stride as isize, 1)
        }
    }
}

/// `out (m×n) <- alpha * op(a) * op(b) + beta * out`, `out` row-major with stride `out_stride`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    a: MatRef<'_, T>,
    ta: bool,
    b: MatRef<'_, T>,
    tb: bool,
    alpha: T,
    beta: T,
    out: &mut [T],
    out_stride: usize,
) {
    let (m, k, rsa, csa) = a.parts(ta);
    let (k2, n, rsb, csb) = b.parts(tb);
    assert_eq!(k, k2, "inner extents differ: {k} vs {k2}");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * out_stride + n <= out.len(), "output view exceeds buffer");
    if k == 0 {
        for r in 0..m {
            for v in &mut out[r * out_stride..r * out_stride + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(a, m, k), false, MatRef::new(b, k, n), false, T::one(), T::zero(), &mut out, n);
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(a, m, k), false, MatRef::new(b, n, k), true, T::one(), T::zero(), &mut out, n);
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(a, k, m), true, MatRef::new(b, k, n), false, T::one(), T::zero(), &mut out, n);
    out
}
