//! Exact 3D geometry in f64: rotations, rigid transforms, a 3×3 SVD and the
//! weighted Procrustes solvers used by the rotation head and the baselines.

use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::sum::column_sums;

pub type Vec3 = [f64; 3];
/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Singular values below this fraction of the largest make `H` rank-deficient.
pub const DEGENERATE_RATIO: f64 = 1e-9;

static SVD_INVOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`svd3`] calls made by this process so far.
pub fn svd_invocations() -> usize {
    SVD_INVOCATIONS.load(Ordering::Relaxed)
}

pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn skew(v: &Vec3) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_column(m: &mut Mat3, j: usize, c: &Vec3) {
    for i in 0..3 {
        m[i][j] = c[i];
    }
}

/// Largest deviation of `mᵀm` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let mtm = mat_mul(&transpose(m), m);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((mtm[i][j] - target).abs());
        }
    }
    worst
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    orthonormality_error(m) <= tol && (det(m) - 1.0).abs() <= tol
}

/// Rotation `r` followed by translation `t`: `p ↦ r·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { r: IDENTITY, t: [0.0; 3] }
    }

    pub fn new(r: Mat3, t: Vec3) -> Self {
        RigidTransform { r, t }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        add(&mat_vec(&self.r, p), &self.t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform { r: mat_mul(&self.r, &other.r), t: self.apply(&other.t) }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.r);
        RigidTransform { r: rt, t: scale(&mat_vec(&rt, &self.t), -1.0) }
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        is_rotation(&self.r, tol)
    }
}

/// `m = u · diag(s) · vᵀ`, singular values sorted descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        let mut us = self.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= self.s[j];
            }
        }
        mat_mul(&us, &transpose(&self.v))
    }
}

fn any_perpendicular(a: &Vec3) -> Vec3 {
    // Cross with the axis least aligned with `a`.
    let idx = (0..3).min_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs())).unwrap_or(0);
    let mut e = [0.0; 3];
    e[idx] = 1.0;
    let c = cross(a, &e);
    scale(&c, 1.0 / norm(&c))
}

/// One-sided (Hestenes) Jacobi SVD of a 3×3 matrix.
///
/// Columns of `m·v` are orthogonalised by plane rotations until every pair is
/// orthogonal to 1e-15 relative; their norms are the singular values.
pub fn svd3(m: &Mat3) -> Result<Svd3> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "svd3 input has non-finite entries");
    }
    SVD_INVOCATIONS.fetch_add(1, Ordering::Relaxed);

    let mut a = *m;
    let mut v = IDENTITY;
    for _sweep in 0..64 {
        let mut rotated = false;
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha: f64 = (0..3).map(|i| a[i][p] * a[i][p]).sum();
            let beta: f64 = (0..3).map(|i| a[i][q] * a[i][q]).sum();
            let gamma: f64 = (0..3).map(|i| a[i][p] * a[i][q]).sum();
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for mat in [&mut a, &mut v] {
                for row in mat.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [norm(&column(&a, 0)), norm(&column(&a, 1)), norm(&column(&a, 2))];
    let mut order = [0usize, 1, 2];
    // Stable: equal singular values keep their column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut s = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        set_column(&mut vs, dst, &column(&v, src));
    }
    let floor = s[0] * 1e-13;
    let mut cols: [Option<Vec3>; 3] = [None, None, None];
    for (dst, &src) in order.iter().enumerate() {
        if s[dst] > floor && s[dst] > 0.0 {
            cols[dst] = Some(scale(&column(&a, src), 1.0 / s[dst]));
        }
    }
    let u0 = cols[0].unwrap_or([1.0, 0.0, 0.0]);
    let u1 = cols[1].unwrap_or_else(|| if s[0] > 0.0 { any_perpendicular(&u0) } else { [0.0, 1.0, 0.0] });
    let u2 = cols[2].unwrap_or_else(|| if s[0] > 0.0 { cross(&u0, &u1) } else { [0.0, 0.0, 1.0] });
    set_column(&mut u, 0, &u0);
    set_column(&mut u, 1, &u1);
    set_column(&mut u, 2, &u2);
    Ok(Svd3 { u, s, v: vs })
}

/// Rotation maximising `trace(R·H)` for a cross-covariance `H = Σ w x yᵀ`,
/// i.e. minimising `Σ w‖R x − y‖²`.
pub fn rotation_from_cross_covariance(h: &Mat3) -> Result<Mat3> {
    let svd = svd3(h)?;
    if !(svd.s[0] > 0.0) || svd.s[1] < DEGENERATE_RATIO * svd.s[0] {
        bail!(Degenerate, "cross-covariance has rank < 2 (singular values {:?})", svd.s);
    }
    let vut = mat_mul(&svd.v, &transpose(&svd.u));
    let d = if det(&vut) < 0.0 { -1.0 } else { 1.0 };
    let mut vd = svd.v;
    for row in vd.iter_mut() {
        row[2] *= d;
    }
    Ok(mat_mul(&vd, &transpose(&svd.u)))
}

fn check_weighted_inputs(x: &[Vec3], y: &[Vec3], w: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != w.len() {
        bail!(Shape, "procrustes inputs: {} sources, {} targets, {} weights", x.len(), y.len(), w.len());
    }
    if x.len() < 3 {
        bail!(InvalidArgument, "procrustes needs at least 3 correspondences, got {}", x.len());
    }
    if x.iter().chain(y).flatten().any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "procrustes inputs contain non-finite coordinates");
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!(InvalidArgument, "procrustes weights must be finite and non-negative");
    }
    let total = crate::sum::sum(w);
    if !(total > 0.0) {
        bail!(Degenerate, "procrustes weights sum to zero");
    }
    Ok(total)
}

/// `Σ wᵢ (xᵢ − cx)(yᵢ − cy)ᵀ`, independent of the point order.
fn cross_covariance(x: &[Vec3], y: &[Vec3], w: &[f64], cx: &Vec3, cy: &Vec3) -> Mat3 {
    let s = column_sums(x.len(), 9, |i, buf| {
        let dx = sub(&x[i], cx);
        let dy = sub(&y[i], cy);
        for a in 0..3 {
            for b in 0..3 {
                buf[a * 3 + b] = w[i] * dx[a] * dy[b];
            }
        }
    });
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
}

/// Rotation minimising `Σ wᵢ‖R·xᵢ − y′ᵢ‖²` with the translation already removed
/// from the targets. No centroid subtraction takes place.
pub fn weighted_procrustes_rotation(x: &[Vec3], y_prime: &[Vec3], w: &[f64]) -> Result<Mat3> {
    check_weighted_inputs(x, y_prime, w)?;
    rotation_from_cross_covariance(&cross_covariance(x, y_prime, w, &[0.0; 3], &[0.0; 3]))
}

/// Classical weighted Kabsch: minimises `Σ wᵢ‖R·xᵢ + t − yᵢ‖²` over `R` and `t`.
pub fn weighted_kabsch_full(x: &[Vec3], y: &[Vec3], w: &[f64]) -> Result<RigidTransform> {
    let total = check_weighted_inputs(x, y, w)?;
    let c = column_sums(x.len(), 6, |i, buf| {
        for a in 0..3 {
            buf[a] = w[i] * x[i][a];
            buf[3 + a] = w[i] * y[i][a];
        }
    });
    let cx = scale(&[c[0], c[1], c[2]], 1.0 / total);
    let cy = scale(&[c[3], c[4], c[5]], 1.0 / total);
    let r = rotation_from_cross_covariance(&cross_covariance(x, y, w, &cx, &cy))?;
    let t = sub(&cy, &mat_vec(&r, &cx));
    Ok(RigidTransform { r, t })
}

/// Geodesic angle between two rotations, in degrees, within `[0, 180]`.
///
/// Equal to `acos((trace(r_gtᵀ·r_est) − 1)/2)`; evaluated through `atan2` of the
/// antisymmetric and trace parts, which keeps full precision near 0° and 180°.
pub fn rotation_error_iso(r_est: &Mat3, r_gt: &Mat3) -> f64 {
    let rel = mat_mul(&transpose(r_gt), r_est);
    let cos = ((rel[0][0] + rel[1][1] + rel[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * norm(&[rel[2][1] - rel[1][2], rel[0][2] - rel[2][0], rel[1][0] - rel[0][1]]);
    sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
}

pub fn translation_error_l2(t_est: &Vec3, t_gt: &Vec3) -> f64 {
    norm(&sub(t_est, t_gt))
}

/// Rodrigues: rotation by angle `‖v‖` about `v/‖v‖`.
pub fn axis_angle_to_rotation(v: &Vec3) -> Mat3 {
    let theta2 = dot(v, v);
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotation of `degrees` about a (not necessarily unit) `axis`.
pub fn rotation_about(axis: &Vec3, degrees: f64) -> Mat3 {
    let n = norm(axis);
    if n == 0.0 {
        return IDENTITY;
    }
    axis_angle_to_rotation(&scale(axis, degrees.to_radians() / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::Rng as _;

    fn rng(seed: u64) -> crate::rng::Rng {
        crate::rng::keyed(seed, "geom-tests")
    }

    fn random_mat(r: &mut crate::rng::Rng) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        m
    }

    fn random_rotation(r: &mut crate::rng::Rng) -> Mat3 {
        let axis = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        rotation_about(&axis, r.random_range(0.0..180.0))
    }

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd3(&IDENTITY).unwrap();
        assert_eq!(s.u, IDENTITY);
        assert_eq!(s.v, IDENTITY);
        assert_eq!(s.s, [1.0, 1.0, 1.0]);
        let d = svd3(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(d.s, [3.0, 2.0, 1.0]);
        let d = svd3(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(d.s, [3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut r = rng(1);
        for _ in 0..100 {
            let m = random_mat(&mut r);
            let s = svd3(&m).unwrap();
            assert!(max_abs_diff(&s.reconstruct(), &m) < 1e-10);
            assert!(orthonormality_error(&s.u) < 1e-10);
            assert!(orthonormality_error(&s.v) < 1e-10);
            assert!(s.s[0] >= s.s[1] && s.s[1] >= s.s[2] && s.s[2] >= 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient_inputs() {
        let rank1 = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]];
        let s = svd3(&rank1).unwrap();
        assert!(max_abs_diff(&s.reconstruct(), &rank1) < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-12);
        let zero = [[0.0; 3]; 3];
        let s = svd3(&zero).unwrap();
        assert_eq!(s.s, [0.0; 3]);
        assert!(orthonormality_error(&s.u) < 1e-15);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = IDENTITY;
        m[1][2] = f64::NAN;
        assert!(matches!(svd3(&m), Err(crate::Error::InvalidArgument(_))));
    }

    fn cloud(r: &mut crate::rng::Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn procrustes_identity() {
        let mut r = rng(2);
        let x = cloud(&mut r, 20);
        let w = alloc::vec![1.0; 20];
        let rot = weighted_procrustes_rotation(&x, &x, &w).unwrap();
        assert!(max_abs_diff(&rot, &IDENTITY) < 1e-12);
    }

    #[test]
    fn procrustes_maps_source_onto_target() {
        let mut r = rng(3);
        for _ in 0..100 {
            let r0 = random_rotation(&mut r);
            let x = cloud(&mut r, 30);
            let y: Vec<Vec3> = x.iter().map(|p| mat_vec(&r0, p)).collect();
            let rot = weighted_procrustes_rotation(&x, &y, &alloc::vec![1.0; 30]).unwrap();
            assert!(rotation_error_iso(&rot, &r0).to_radians() < 1e-5);
            assert!(is_rotation(&rot, 1e-9));
        }
    }

    #[test]
    fn procrustes_is_globally_optimal_against_random_rotations() {
        let mut r = rng(4);
        for _ in 0..5 {
            let x = cloud(&mut r, 25);
            let y = cloud(&mut r, 25);
            let w: Vec<f64> = (0..25).map(|_| r.random_range(0.0..1.0)).collect();
            let objective = |rot: &Mat3| -> f64 {
                x.iter().zip(&y).zip(&w).map(|((a, b), wi)| wi * dot(&sub(&mat_vec(rot, a), b), &sub(&mat_vec(rot, a), b))).sum()
            };
            let best = objective(&weighted_procrustes_rotation(&x, &y, &w).unwrap());
            for _ in 0..1000 {
                assert!(best <= objective(&random_rotation(&mut r)) + 1e-12);
            }
        }
    }

    #[test]
    fn procrustes_degenerate_inputs() {
        let x = alloc::vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let err = weighted_kabsch_full(&x, &x, &[1.0; 4]).unwrap_err();
        assert!(matches!(err, crate::Error::Degenerate(_)));
        let err = weighted_procrustes_rotation(&x, &x, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, crate::Error::Degenerate(_)));
        assert!(weighted_procrustes_rotation(&x[..2], &x[..2], &[1.0; 2]).is_err());
        assert!(weighted_procrustes_rotation(&x, &x, &[1.0, -1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn kabsch_identity_and_recovery() {
        let mut r = rng(5);
        let x = cloud(&mut r, 10);
        let tf = weighted_kabsch_full(&x, &x, &[1.0; 10]).unwrap();
        assert!(max_abs_diff(&tf.r, &IDENTITY) < 1e-12);
        assert!(norm(&tf.t) < 1e-12);

        for _ in 0..50 {
            let gt = RigidTransform::new(random_rotation(&mut r), [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
            let x = cloud(&mut r, 40);
            let mut y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
            let mut w = alloc::vec![1.0; 40];
            for i in (0..40).step_by(2) {
                y[i] = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
                w[i] = 0.0;
            }
            let tf = weighted_kabsch_full(&x, &y, &w).unwrap();
            assert!(rotation_error_iso(&tf.r, &gt.r).to_radians() < 1e-5);
            assert!(translation_error_l2(&tf.t, &gt.t) < 1e-5);
        }
    }

    #[test]
    fn kabsch_invariant_to_weight_rescaling() {
        let mut r = rng(6);
        let x = cloud(&mut r, 30);
        let y = cloud(&mut r, 30);
        let w: Vec<f64> = (0..30).map(|_| r.random_range(0.1..1.0)).collect();
        let a = weighted_kabsch_full(&x, &y, &w).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
            let b = weighted_kabsch_full(&x, &y, &ws).unwrap();
            assert!(max_abs_diff(&a.r, &b.r) < 1e-7);
            assert!(translation_error_l2(&a.t, &b.t) < 1e-7);
        }
    }

    #[test]
    fn rotation_error_cases() {
        assert_eq!(rotation_error_iso(&IDENTITY, &IDENTITY), 0.0);
        let rz5 = rotation_about(&[0.0, 0.0, 1.0], 5.0);
        assert!((rotation_error_iso(&rz5, &IDENTITY) - 5.0).abs() < 1e-10);
        let rx180 = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!((rotation_error_iso(&rx180, &IDENTITY) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_error_symmetry_and_left_invariance() {
        let mut r = rng(7);
        for _ in 0..100 {
            let (a, b, c) = (random_rotation(&mut r), random_rotation(&mut r), random_rotation(&mut r));
            let e = rotation_error_iso(&a, &b);
            assert!((e - rotation_error_iso(&b, &a)).abs() < 1e-9);
            assert!((e - rotation_error_iso(&mat_mul(&c, &a), &mat_mul(&c, &b))).abs() < 1e-9);
            assert!((0.0..=180.0).contains(&e));
        }
    }

    #[test]
    fn translation_error_cases() {
        assert_eq!(translation_error_l2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(translation_error_l2(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]), 1.0);
        let mut r = rng(8);
        for _ in 0..20 {
            let a: Vec3 = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let b: Vec3 = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let expect = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!((translation_error_l2(&a, &b) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rodrigues_cases() {
        assert_eq!(axis_angle_to_rotation(&[0.0; 3]), IDENTITY);
        let half_pi = core::f64::consts::FRAC_PI_2;
        let r = axis_angle_to_rotation(&[0.0, 0.0, half_pi]);
        // sin(π/2)=1, 1−cos(π/2)=1 → [[0,−1,0],[1,0,0],[0,0,1]]
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(max_abs_diff(&r, &expect) < 1e-15);

        let mut rg = rng(9);
        for _ in 0..100 {
            let dir = [rg.random_range(-1.0..1.0), rg.random_range(-1.0..1.0), rg.random_range(-1.0..1.0)];
            let angle = rg.random_range(0.0..core::f64::consts::PI);
            let v = scale(&dir, angle / norm(&dir));
            let rot = axis_angle_to_rotation(&v);
            assert!(is_rotation(&rot, 1e-12));
            assert!((rotation_error_iso(&rot, &IDENTITY) - angle.to_degrees()).abs() < 1e-6);
        }
    }
}
