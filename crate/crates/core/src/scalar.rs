//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and DSP oracles run in `f64`.
//! The only operation that needs a per-type implementation is the dense
//! matrix product, which dispatches to the matching `matrixmultiply` kernel.

use crate::tensor::direct;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Strided read-only view of a matrix stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose, without copying.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    /// Raw GEMM kernel: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// All pointers must be valid for the extents and strides given.
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

    /// Whether [`Scalar::direct_corr`] has a fast kernel on this CPU.
    #[doc(hidden)]
    fn has_direct_kernel() -> bool {
        false
    }

    /// Multi-channel shifted correlation used by the convolution layers;
    /// returns false when no specialised kernel exists.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn direct_corr(
        _xp: &[Self],
        _offsets: &[usize],
        _wpack: &[Self],
        _cout: usize,
        _n_pad: usize,
        _y: &mut [Self],
        _ldy: usize,
    ) -> bool {
        false
    }

    /// Weight gradient of [`Scalar::direct_corr`], accumulated into `dw`.
    #[doc(hidden)]
    fn direct_wgrad(_xp: &[Self], _offsets: &[usize], _gp: &[Self], _cout: usize, _n_pad: usize, _dw: &mut [Self]) -> bool {
        false
    }

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
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

    fn has_direct_kernel() -> bool {
        direct::available()
    }

    fn direct_corr(
        xp: &[f32],
        offsets: &[usize],
        wpack: &[f32],
        cout: usize,
        n_pad: usize,
        y: &mut [f32],
        ldy: usize,
    ) -> bool {
        direct::corr(&direct::DirectArgs { xp, offsets, wpack, cout, n_pad, ldy }, y)
    }

    fn direct_wgrad(xp: &[f32], offsets: &[usize], gp: &[f32], cout: usize, n_pad: usize, dw: &mut [f32]) -> bool {
        direct::wgrad(&direct::WgradArgs { xp, offsets, gp, cout, n_pad }, dw)
    }
}

impl Scalar for f64 {
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

/// `c (m x n, row-major with row stride ldc) = a * b (+ c if accumulate)`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len().max(1) || k == 0);
    assert!(b.max_index() < b.data.len().max(1) || k == 0);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output too small");
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(MatRef::row_major(&a, 2, 3), MatRef::row_major(&b, 3, 4), &mut c, 4, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // transposed view and accumulation
        let mut d = vec![1.0; 8];
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]; // 3x2 = a^T
        gemm(MatRef::row_major(&at, 3, 2).t(), MatRef::row_major(&b, 3, 4), &mut d, 4, true);
        for (x, y) in c.iter().zip(&d) {
            assert_eq!(*x + 1.0, *y);
        }
    }
}
