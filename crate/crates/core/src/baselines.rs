//! Classical solvers: RANSAC over correspondences, point-to-point ICP and
//! plain Procrustes over every correspondence.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{CorrespondenceSet, DEFAULT_TAU_LABEL};
use crate::error::{bail, Result};
use crate::geom::{self, RigidTransform, Vec3};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iters: usize,
    /// Residual strictly below this counts as an inlier.
    pub inlier_thresh: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { iters: 1000, inlier_thresh: DEFAULT_TAU_LABEL, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    /// No hypothesis reached 3 inliers; the transform is the identity.
    pub failed: bool,
    /// Iteration that produced the best hypothesis.
    pub best_iteration: usize,
    /// Samples skipped because their three points were degenerate.
    pub skipped: usize,
}

fn residual_mask(tr: &RigidTransform, x: &[Vec3], y: &[Vec3], thresh: f64) -> Vec<bool> {
    x.iter().zip(y).map(|(p, q)| geom::norm(&geom::sub(q, &tr.apply(p))) < thresh).collect()
}

/// Upper bound on consensus refits after sampling.
pub const MAX_REFITS: usize = 50;

/// Three-point RANSAC. The best hypothesis is refitted on its consensus set,
/// each point weighted by the biweight `(1 − (r/τ)²)²` of its current residual,
/// until both the set and the pose stop changing.
pub fn ransac(x: &[Vec3], y: &[Vec3], cfg: &RansacConfig) -> Result<RansacResult> {
    let n = x.len();
    if y.len() != n {
        bail!(Shape, "ransac: {} sources vs {} targets", n, y.len());
    }
    if n < 3 {
        bail!(InvalidArgument, "ransac needs at least 3 correspondences, got {}", n);
    }
    let mut r = rng::keyed(cfg.seed, "ransac");
    let mut best: Option<(usize, usize, RigidTransform)> = None;
    let mut skipped = 0;
    for it in 0..cfg.iters {
        let idx = rand::seq::index::sample(&mut r, n, 3);
        let (xs, ys): (Vec<Vec3>, Vec<Vec3>) = idx.iter().map(|i| (x[i], y[i])).unzip();
        let Ok(tr) = geom::weighted_kabsch_full(&xs, &ys, &[1.0; 3]) else {
            skipped += 1;
            continue;
        };
        let count = residual_mask(&tr, x, y, cfg.inlier_thresh).iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, it, tr));
        }
    }
    let failure = |skipped| RansacResult {
        transform: RigidTransform::identity(),
        inliers: vec![false; n],
        failed: true,
        best_iteration: 0,
        skipped,
    };
    let Some((count, best_iteration, tr)) = best else { return Ok(failure(skipped)) };
    if count < 3 {
        return Ok(failure(skipped));
    }
    let mut transform = tr;
    let mut inliers = residual_mask(&tr, x, y, cfg.inlier_thresh);
    for _ in 0..MAX_REFITS {
        let w: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(p, q)| {
                let u = geom::norm(&geom::sub(q, &transform.apply(p))) / cfg.inlier_thresh;
                if u < 1.0 { (1.0 - u * u).powi(2) } else { 0.0 }
            })
            .collect();
        let Ok(next) = geom::weighted_kabsch_full(x, y, &w) else { break };
        let mask = residual_mask(&next, x, y, cfg.inlier_thresh);
        let change = geom::rotation_error_iso(&next.r, &transform.r).to_radians()
            + geom::translation_error_l2(&next.t, &transform.t);
        transform = next;
        let settled = mask == inliers && change < 1e-12;
        inliers = mask;
        if settled {
            break;
        }
    }
    Ok(RansacResult { transform, inliers, failed: false, best_iteration, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the update moves the rotation by less than this many radians
    /// plus translation units.
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_iters: 50, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(p: &Vec3, cloud: &[Vec3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, q) in cloud.iter().enumerate() {
        let d = geom::sub(p, q);
        let d2 = geom::dot(&d, &d);
        if d2 < best.0 {
            best = (d2, j);
        }
    }
    best.1
}

/// Point-to-point ICP with exact nearest neighbours; pairing of the inputs is ignored.
pub fn icp(x: &[Vec3], y: &[Vec3], cfg: &IcpConfig, init: &RigidTransform) -> Result<IcpResult> {
    if x.len() < 3 || y.len() < 3 {
        bail!(InvalidArgument, "icp needs at least 3 points per cloud, got {} and {}", x.len(), y.len());
    }
    let ones = vec![1.0; x.len()];
    let mut tr = *init;
    for it in 1..=cfg.max_iters {
        let matched: Vec<Vec3> = x.iter().map(|p| y[nearest(&tr.apply(p), y)]).collect();
        let Ok(next) = geom::weighted_kabsch_full(x, &matched, &ones) else {
            return Ok(IcpResult { transform: tr, iterations: it, converged: false });
        };
        let change = geom::rotation_error_iso(&next.r, &tr.r).to_radians() + geom::translation_error_l2(&next.t, &tr.t);
        tr = next;
        if change < cfg.tol {
            return Ok(IcpResult { transform: tr, iterations: it, converged: true });
        }
    }
    Ok(IcpResult { transform: tr, iterations: cfg.max_iters, converged: false })
}

/// Unit-weight Kabsch over every correspondence.
pub fn procrustes_all(set: &CorrespondenceSet) -> Result<RigidTransform> {
    set.validate()?;
    geom::weighted_kabsch_full(&set.source(), &set.target(), &vec![1.0; set.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec};
    use crate::error::Error;

    fn noise_free(seed: u64, ratio: f64, n: usize) -> CorrespondenceSet {
        let spec = GenSpec { n_corr: n, inlier_ratio: ratio, noise_sigma: 0.0, ..GenSpec::default() };
        generate(&spec, seed).unwrap()
    }

    fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        (geom::rotation_error_iso(&a.r, &b.r).to_radians(), geom::translation_error_l2(&a.t, &b.t))
    }

    #[test]
    fn ransac_recovers_noise_free_poses() {
        let mut clean = 0;
        for seed in 0..50 {
            let set = noise_free(seed, 0.5, 256);
            let gt = set.gt.unwrap();
            let res = ransac(&set.source(), &set.target(), &RansacConfig { seed, ..Default::default() }).unwrap();
            assert!(!res.failed);
            assert_eq!(&res.inliers, set.labels.as_ref().unwrap(), "seed {seed}");
            assert!(geom::is_rotation(&res.transform.r, 1e-9));
            // Outliers that land within the threshold pull the refit off the planted pose.
            if set.residuals(&gt).iter().zip(set.labels.as_ref().unwrap()).all(|(r, &l)| !l || *r < 1e-6) {
                let (dr, dt) = pose_error(&res.transform, &gt);
                assert!(dr < 1e-5 && dt < 1e-5, "seed {seed}: {dr} {dt}");
                clean += 1;
            }
        }
        assert!(clean >= 25, "only {clean} sets without near-miss outliers");
    }

    #[test]
    fn ransac_all_inliers_first_iteration() {
        let set = noise_free(3, 1.0, 64);
        let res = ransac(&set.source(), &set.target(), &RansacConfig::default()).unwrap();
        assert_eq!(res.best_iteration, 0);
        assert!(res.inliers.iter().all(|&m| m));
    }

    #[test]
    fn ransac_skips_collinear_samples() {
        let x: Vec<Vec3> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let res = ransac(&x, &x, &RansacConfig { iters: 20, ..Default::default() }).unwrap();
        assert_eq!(res.skipped, 20);
        assert!(res.failed);
        assert_eq!(res.transform, RigidTransform::identity());
        assert!(res.inliers.iter().all(|&m| !m));
        assert!(matches!(ransac(&x[..2], &x[..2], &RansacConfig::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ransac_is_deterministic() {
        let set = generate(&GenSpec { n_corr: 128, inlier_ratio: 0.3, ..GenSpec::default() }, 9).unwrap();
        let cfg = RansacConfig { iters: 200, seed: 4, ..Default::default() };
        let a = ransac(&set.source(), &set.target(), &cfg).unwrap();
        let b = ransac(&set.source(), &set.target(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn icp_identity_and_small_rotation() {
        let set = noise_free(5, 1.0, 100);
        let x = set.source();
        let res = icp(&x, &x, &IcpConfig::default(), &RigidTransform::identity()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        let (dr, dt) = pose_error(&res.transform, &RigidTransform::identity());
        assert!(dr < 1e-12 && dt < 1e-12);

        let gt = RigidTransform::new(geom::rotation_about(&[1.0, 2.0, 0.5], 3.0), [0.0; 3]);
        let y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
        let res = icp(&x, &y, &IcpConfig::default(), &RigidTransform::identity()).unwrap();
        assert!(pose_error(&res.transform, &gt).0 < 1e-3);
    }

    #[test]
    fn icp_terminates_on_large_rotation() {
        let set = noise_free(6, 1.0, 80);
        let x = set.source();
        let gt = RigidTransform::new(geom::rotation_about(&[0.0, 0.0, 1.0], 90.0), [0.2, 0.0, 0.0]);
        let y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
        let cfg = IcpConfig { max_iters: 30, ..Default::default() };
        let res = icp(&x, &y, &cfg, &RigidTransform::identity()).unwrap();
        assert!(res.iterations <= 30);
        assert!(geom::is_rotation(&res.transform.r, 1e-9));
    }

    #[test]
    fn procrustes_all_cases() {
        let set = noise_free(7, 1.0, 50);
        let (dr, dt) = pose_error(&procrustes_all(&set).unwrap(), &set.gt.unwrap());
        assert!(dr < 1e-6 && dt < 1e-6, "{dr} {dt}");

        let line: Vec<[f32; 3]> = (0..5).map(|i| [i as f32, 0.0, 0.0]).collect();
        let degenerate = CorrespondenceSet::new(line.clone(), line).unwrap();
        assert!(matches!(procrustes_all(&degenerate), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ransac_beats_procrustes_under_outliers() {
        let mut wins = 0;
        for seed in 0..50 {
            let spec = GenSpec { n_corr: 128, inlier_ratio: 0.5, ..GenSpec::default() };
            let set = generate(&spec, 1000 + seed).unwrap();
            let gt = set.gt.unwrap();
            let naive = procrustes_all(&set).unwrap();
            let rs = ransac(&set.source(), &set.target(), &RansacConfig { seed, ..Default::default() }).unwrap();
            if pose_error(&rs.transform, &gt).1 < pose_error(&naive, &gt).1 {
                wins += 1;
            }
        }
        assert!(wins >= 45, "ransac won {wins}/50");
    }
}
