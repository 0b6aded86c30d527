//! Order-independent summation.
//!
//! Every reduction over the correspondence axis goes through these helpers so
//! that permuting the points leaves the result bit-identical. Each term is
//! rounded onto a fixed-point grid chosen from the column's largest magnitude
//! and the row count, then accumulated in an `i64`, which is exact and
//! associative.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::Real;

/// Bits available to the sum of all terms of a column.
const TOTAL_BITS: i32 = 62;

/// Exponent `e` with `v < 2^e` for a positive finite `v`.
fn exponent_bound(v: f64) -> i32 {
    let biased = ((v.to_bits() >> 52) & 0x7ff) as i32;
    biased.max(1) - 1022
}

/// Bits per term when `rows` terms must add up without overflow.
fn term_bits(rows: usize) -> i32 {
    let log = usize::BITS - rows.max(1).leading_zeros();
    TOTAL_BITS - log as i32
}

/// Grid scale `2^k` as two factors, so neither overflows for tiny columns.
fn grid_scale(max_abs: f64, bits: i32) -> (f64, f64) {
    let shift = bits - exponent_bound(max_abs);
    let half = shift / 2;
    (Float::powi(2.0f64, half), Float::powi(2.0f64, shift - half))
}

#[inline]
fn to_grid(v: f64, s: (f64, f64)) -> i64 {
    let y = v * s.0 * s.1;
    (y + Float::copysign(0.5, y)) as i64
}

/// Per-column sums over `rows` rows of `cols` terms; `term(i, buf)` writes the
/// terms of row `i` into `buf`.
pub fn column_sums<T: Real>(rows: usize, cols: usize, mut term: impl FnMut(usize, &mut [T])) -> Vec<T> {
    let mut vals = vec![T::zero(); rows * cols];
    let mut max_abs = vec![0.0f64; cols];
    let mut finite = vec![true; cols];
    for (i, row) in vals.chunks_exact_mut(cols.max(1)).take(rows).enumerate() {
        term(i, row);
        for ((m, f), &v) in max_abs.iter_mut().zip(finite.iter_mut()).zip(row.iter()) {
            let a = v.f64().abs();
            if a.is_finite() {
                *m = m.max(a);
            } else {
                *f = false;
            }
        }
    }
    let bits = term_bits(rows);
    let scales: Vec<(f64, f64)> = max_abs.iter().map(|&m| if m > 0.0 { grid_scale(m, bits) } else { (1.0, 1.0) }).collect();
    let mut acc = vec![0i64; cols];
    let single: Vec<f64> = scales.iter().map(|s| s.0 * s.1).collect();
    if finite.iter().all(|&f| f) && single.iter().all(|s| s.is_normal()) {
        for row in vals.chunks_exact(cols.max(1)).take(rows) {
            for ((a, &v), &sc) in acc.iter_mut().zip(row).zip(&single) {
                *a += to_grid(v.f64(), (sc, 1.0));
            }
        }
        return acc.iter().zip(&single).map(|(&a, &sc)| T::of(a as f64 / sc)).collect();
    }
    let mut fallback = vec![T::zero(); cols];
    for row in vals.chunks_exact(cols.max(1)).take(rows) {
        for j in 0..cols {
            if finite[j] {
                acc[j] += to_grid(row[j].f64(), scales[j]);
            } else {
                fallback[j] += row[j];
            }
        }
    }
    (0..cols)
        .map(|j| if finite[j] { T::of(acc[j] as f64 / scales[j].0 / scales[j].1) } else { fallback[j] })
        .collect()
}

/// Order-independent sum of a sequence.
pub fn sum<T: Real>(values: &[T]) -> T {
    column_sums(values.len(), 1, |i, buf: &mut [T]| buf[0] = values[i])[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_plain_sum_closely() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64 - 50.0) * 1e-3).collect();
        let plain: f64 = v.iter().sum();
        assert!((sum(&v) - plain).abs() < 1e-12);
        assert_eq!(sum::<f64>(&[]), 0.0);
        assert_eq!(sum(&[0.0f32, 0.0]), 0.0);
    }

    #[test]
    fn handles_extreme_magnitudes() {
        assert_eq!(sum(&[1e-300f64, 2e-300]), 3e-300);
        assert_eq!(sum(&[f64::MIN_POSITIVE * 0.5; 2]), f64::MIN_POSITIVE);
        assert_eq!(sum(&[1e300f64, 1e300]), 2e300);
        assert!(sum(&[1.0f32, f32::NAN]).is_nan());
        assert_eq!(sum(&[1.0f64, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn columns_are_independent() {
        let rows = [[1.0f32, 1e-6], [2.0, 3e-6], [-0.5, -1e-6]];
        let s = column_sums(3, 2, |i, buf: &mut [f32]| buf.copy_from_slice(&rows[i]));
        assert_eq!(s[0], 2.5);
        assert!((s[1] - 3e-6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn permutation_invariant(v in prop::collection::vec(-1e3f32..1e3, 1..200), seed in any::<u64>()) {
            let mut w = v.clone();
            let mut s = seed;
            for i in (1..w.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                w.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(sum(&v).to_bits(), sum(&w).to_bits());
            let plain: f64 = v.iter().map(|&x| x as f64).sum();
            prop_assert!((sum(&v) as f64 - plain).abs() <= 1e-3 * (1.0 + plain.abs()));
        }
    }
}
