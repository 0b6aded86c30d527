//! Scalar abstraction so every kernel runs in f32 (training) or f64 (gradient checks).

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

pub trait Real:
    Float
    + Debug
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a · b (+ c)` where `a` is an `m × k` view, `b` a `k × n` view and `c` an
    /// `m × n` block of `out` starting at `c_offset` with row stride `c_row_stride`.
    /// View extents are bounds-checked before the kernel runs.
    #[allow(clippy::too_many_arguments)]
    fn gemm_into(
        m: usize,
        k: usize,
        n: usize,
        a: Strided<'_, Self>,
        b: Strided<'_, Self>,
        out: &mut [Self],
        c_offset: usize,
        c_row_stride: usize,
        accumulate: bool,
    );

    /// Contiguous `m × n` output variant of [`Real::gemm_into`].
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, c: &mut [Self], accumulate: bool) {
        Self::gemm_into(m, k, n, a, b, c, 0, n, accumulate)
    }
}

/// A read-only matrix view with explicit row/column strides.
#[derive(Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> Strided<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Strided { data, offset: 0, row_stride: cols, col_stride: 1 }
    }

    /// View of a row-major `rows × cols` buffer as its transpose.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Strided { data, offset: 0, row_stride: 1, col_stride: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided view out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            #[inline(always)]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm_into(
                m: usize,
                k: usize,
                n: usize,
                a: Strided<'_, Self>,
                b: Strided<'_, Self>,
                out: &mut [Self],
                c_offset: usize,
                c_row_stride: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(n <= c_row_stride, "gemm output stride smaller than width");
                assert!(c_offset + (m - 1) * c_row_stride + n <= out.len(), "gemm output too small");
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            let row = c_offset + i * c_row_stride;
                            out[row..row + n].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    return;
                }
                a.check(m, k);
                b.check(k, n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: both input views were bounds-checked above for their full
                // m×k / k×n extents and the output block was checked against `out`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr().add(a.offset),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr().add(b.offset),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        out.as_mut_ptr().add(c_offset),
                        c_row_stride as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);
