//! Synthetic correspondence sets with planted rigid transforms.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geom::{self, RigidTransform, Vec3};
use crate::rng;
use crate::tensor::Tensor;
use crate::Real;

/// Default inlier distance threshold, in scene units.
pub const DEFAULT_TAU_LABEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SetMeta {
    pub inlier_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// `N` putative matches `xᵢ ↔ yᵢ`, optionally with labels and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub x: Vec<[f32; 3]>,
    pub y: Vec<[f32; 3]>,
    pub labels: Option<Vec<bool>>,
    pub gt: Option<RigidTransform>,
    pub meta: SetMeta,
}

impl CorrespondenceSet {
    pub fn new(x: Vec<[f32; 3]>, y: Vec<[f32; 3]>) -> Result<Self> {
        let set = CorrespondenceSet { x, y, labels: None, gt: None, meta: SetMeta::default() };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            bail!(Shape, "{} source points but {} target points", self.x.len(), self.y.len());
        }
        if self.x.len() < 3 {
            bail!(InvalidArgument, "a correspondence set needs at least 3 matches, got {}", self.x.len());
        }
        if let Some(l) = &self.labels {
            if l.len() != self.x.len() {
                bail!(Shape, "{} labels for {} correspondences", l.len(), self.x.len());
            }
        }
        if self.x.iter().chain(&self.y).flatten().any(|v| !v.is_finite()) {
            bail!(InvalidArgument, "non-finite coordinates");
        }
        Ok(())
    }

    pub fn source(&self) -> Vec<Vec3> {
        self.x.iter().map(|p| p.map(f64::from)).collect()
    }

    pub fn target(&self) -> Vec<Vec3> {
        self.y.iter().map(|p| p.map(f64::from)).collect()
    }

    /// Residual `‖yᵢ − (R·xᵢ + t)‖` of every correspondence under `tr`.
    pub fn residuals(&self, tr: &RigidTransform) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(x, y)| geom::norm(&geom::sub(&y.map(f64::from), &tr.apply(&x.map(f64::from)))))
            .collect()
    }

    /// Labels recomputed from the ground truth: inlier iff residual ≤ `tau`.
    pub fn relabel(&self, tau: f64) -> Result<Vec<bool>> {
        let Some(gt) = &self.gt else { bail!(InvalidArgument, "relabel needs a ground-truth transform") };
        Ok(self.residuals(gt).into_iter().map(|r| r <= tau).collect())
    }

    /// Stored labels, or labels derived from the ground truth at `tau`.
    pub fn mask(&self, tau: f64) -> Result<InlierMask> {
        let m = match &self.labels {
            Some(l) => l.clone(),
            None => self.relabel(tau)?,
        };
        Ok(InlierMask { m, tau_label: tau })
    }

    pub fn inlier_fraction(&self) -> Option<f64> {
        self.labels.as_ref().map(|l| l.iter().filter(|&&b| b).count() as f64 / l.len().max(1) as f64)
    }

    /// Applies the permutation `perm` (new index `i` takes old index `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &Vec<[f32; 3]>| perm.iter().map(|&i| v[i]).collect();
        CorrespondenceSet {
            x: pick(&self.x),
            y: pick(&self.y),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
            gt: self.gt,
            meta: self.meta,
        }
    }
}

/// Per-correspondence inlier indicator together with the threshold it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlierMask {
    pub m: Vec<bool>,
    pub tau_label: f64,
}

impl InlierMask {
    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SourceDist {
    /// Uniform in the origin-centred unit cube `[-0.5, 0.5]³`.
    UnitCube,
    /// Isotropic Gaussian blobs around centres drawn from the unit cube.
    GaussianClusters { clusters: usize, spread: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierModel {
    /// Target resampled uniformly in the bounding box of the transformed sources.
    UniformInBox,
    /// Target of a different, randomly chosen correspondence.
    ShuffledPairing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub n_corr: usize,
    pub inlier_ratio: f64,
    pub noise_sigma: f64,
    /// Rotation angle range in degrees.
    pub rotation_deg: [f64; 2],
    /// Translation magnitude range in scene units.
    pub translation: [f64; 2],
    pub source: SourceDist,
    pub outliers: OutlierModel,
    pub tau_label: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_corr: 512,
            inlier_ratio: 0.5,
            noise_sigma: 0.01,
            rotation_deg: [0.0, 45.0],
            translation: [0.0, 1.0],
            source: SourceDist::UnitCube,
            outliers: OutlierModel::UniformInBox,
            tau_label: DEFAULT_TAU_LABEL,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_corr < 3 {
            bail!(InvalidArgument, "n_corr must be at least 3, got {}", self.n_corr);
        }
        if !(0.0..=1.0).contains(&self.inlier_ratio) {
            bail!(InvalidArgument, "inlier ratio {} outside [0, 1]", self.inlier_ratio);
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!(InvalidArgument, "noise sigma must be finite and non-negative");
        }
        for (what, [lo, hi]) in [("rotation", self.rotation_deg), ("translation", self.translation)] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                bail!(InvalidArgument, "{} range [{}, {}] is empty or invalid", what, lo, hi);
            }
        }
        if self.rotation_deg[1] > 180.0 {
            bail!(InvalidArgument, "rotation angles beyond 180 degrees");
        }
        if !(self.tau_label > 0.0) {
            bail!(InvalidArgument, "tau_label must be positive");
        }
        if let SourceDist::GaussianClusters { clusters, spread } = self.source {
            if clusters == 0 || !(spread > 0.0) {
                bail!(InvalidArgument, "cluster mixture needs clusters ≥ 1 and positive spread");
            }
        }
        Ok(())
    }

    pub fn expected_inliers(&self) -> f64 {
        self.inlier_ratio * self.n_corr as f64
    }
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

fn gaussian3(r: &mut rng::Rng) -> Vec3 {
    [StandardNormal.sample(r), StandardNormal.sample(r), StandardNormal.sample(r)]
}

fn unit_vector(r: &mut rng::Rng) -> Vec3 {
    loop {
        let v = gaussian3(r);
        let n = geom::norm(&v);
        if n > 1e-6 {
            return geom::scale(&v, 1.0 / n);
        }
    }
}

fn sample_range(r: &mut rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// Random axis, angle and translation magnitude in the given ranges, rounded to f32.
fn sample_pose(r: &mut rng::Rng, rotation_deg: [f64; 2], translation: [f64; 2]) -> RigidTransform {
    let angle = sample_range(r, rotation_deg);
    let axis = unit_vector(r);
    let mut rot = geom::rotation_about(&axis, angle);
    rot.iter_mut().flatten().for_each(|v| *v = round_f32(*v));
    let t_mag = sample_range(r, translation);
    let t = geom::scale(&unit_vector(r), t_mag).map(round_f32);
    RigidTransform { r: rot, t }
}

/// The same set seen under a fresh pose: every target point becomes
/// `R'·Rᵀ·(y − t) + t'`, so residuals, labels and outlier layout carry over.
pub fn repose(set: &CorrespondenceSet, rotation_deg: [f64; 2], translation: [f64; 2], seed: u64) -> Result<CorrespondenceSet> {
    let Some(old) = set.gt else { bail!(InvalidArgument, "re-posing needs ground truth") };
    let new = sample_pose(&mut rng::keyed(seed, "data.repose"), rotation_deg, translation);
    let rt = geom::transpose(&old.r);
    let y = set
        .y
        .iter()
        .map(|q| {
            let local = geom::mat_vec(&rt, &geom::sub(&q.map(f64::from), &old.t));
            new.apply(&local).map(|v| v as f32)
        })
        .collect();
    Ok(CorrespondenceSet { y, gt: Some(new), ..set.clone() })
}

/// Draws a correspondence set. The same `(spec, seed)` always gives the same set.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<CorrespondenceSet> {
    spec.validate()?;
    if spec.expected_inliers() < 3.0 {
        log::warn!(
            "generator settings give {:.1} expected inliers (< 3); registration is underdetermined",
            spec.expected_inliers()
        );
    }
    let n = spec.n_corr;
    let gt = sample_pose(&mut rng::keyed(seed, "data.pose"), spec.rotation_deg, spec.translation);

    let mut src_rng = rng::keyed(seed, "data.source");
    let x: Vec<Vec3> = match spec.source {
        SourceDist::UnitCube => (0..n)
            .map(|_| [0; 3].map(|_| src_rng.random_range(-0.5..0.5)))
            .collect(),
        SourceDist::GaussianClusters { clusters, spread } => {
            let centres: Vec<Vec3> =
                (0..clusters).map(|_| [0; 3].map(|_| src_rng.random_range(-0.5..0.5))).collect();
            (0..n)
                .map(|_| {
                    let c = centres[src_rng.random_range(0..clusters)];
                    geom::add(&c, &geom::scale(&gaussian3(&mut src_rng), spread))
                })
                .collect()
        }
    };
    let x: Vec<Vec3> = x.into_iter().map(|p| p.map(round_f32)).collect();
    let clean: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();

    let mut role_rng = rng::keyed(seed, "data.roles");
    let n_in = (spec.inlier_ratio * n as f64).round() as usize;
    let mut is_inlier = vec![false; n];
    is_inlier[..n_in].iter_mut().for_each(|b| *b = true);
    is_inlier.shuffle(&mut role_rng);

    let mut noise_rng = rng::keyed(seed, "data.noise");
    let mut outlier_rng = rng::keyed(seed, "data.outliers");
    let (lo, hi) = bounding_box(&clean);
    let y: Vec<Vec3> = (0..n)
        .map(|i| {
            if is_inlier[i] {
                geom::add(&clean[i], &geom::scale(&gaussian3(&mut noise_rng), spec.noise_sigma))
            } else {
                match spec.outliers {
                    OutlierModel::UniformInBox => {
                        core::array::from_fn(|a| if lo[a] < hi[a] { outlier_rng.random_range(lo[a]..hi[a]) } else { lo[a] })
                    }
                    OutlierModel::ShuffledPairing => {
                        let mut j = outlier_rng.random_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        clean[j]
                    }
                }
            }
        })
        .collect();

    let mut set = CorrespondenceSet {
        x: x.iter().map(|p| p.map(|v| v as f32)).collect(),
        y: y.iter().map(|p| p.map(|v| v as f32)).collect(),
        labels: None,
        gt: Some(gt),
        meta: SetMeta { inlier_ratio: spec.inlier_ratio, noise_sigma: spec.noise_sigma, seed },
    };
    set.labels = Some(set.relabel(spec.tau_label)?);
    Ok(set)
}

fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Seed of the `index`-th set of a named split.
pub fn set_seed(seed: u64, split: &str, index: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, split), &alloc::format!("#{index}"))
}

/// `count` sets of one split; set `i` uses inlier ratio `ratios[i % len]`.
pub fn generate_split(base: &GenSpec, ratios: &[f64], count: usize, seed: u64, split: &str) -> Result<Vec<CorrespondenceSet>> {
    if ratios.is_empty() {
        bail!(Empty, "no inlier ratios given");
    }
    (0..count)
        .map(|i| {
            let spec = GenSpec { inlier_ratio: ratios[i % ratios.len()], ..base.clone() };
            generate(&spec, set_seed(seed, split, i as u64))
        })
        .collect()
}

/// `count` evenly spaced values covering `[lo, hi]`.
pub fn ratio_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// A stack of equally sized sets as `[B, N, ·]` tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    /// `[B, N]` inlier indicator, when every set has labels or ground truth.
    pub mask: Option<Tensor<T>>,
    /// `[B, 3, 3]` and `[B, 3]` ground truth, when every set has it.
    pub r_gt: Option<Tensor<T>>,
    pub t_gt: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn from_sets(sets: &[&CorrespondenceSet], tau: f64) -> Result<Self> {
        let Some(first) = sets.first() else { bail!(Empty, "empty batch") };
        let n = first.len();
        for s in sets {
            s.validate()?;
            if s.len() != n {
                bail!(Shape, "batch mixes sets of {} and {} correspondences", n, s.len());
            }
        }
        let b = sets.len();
        let flat = |f: &dyn Fn(&CorrespondenceSet) -> &Vec<[f32; 3]>| {
            let data = sets.iter().flat_map(|s| f(s).iter().flatten().map(|&v| T::of(f64::from(v)))).collect();
            Tensor::new(&[b, n, 3], data)
        };
        let x = flat(&|s| &s.x)?;
        let y = flat(&|s| &s.y)?;
        let has_gt = sets.iter().all(|s| s.gt.is_some());
        let mask = if sets.iter().all(|s| s.labels.is_some() || s.gt.is_some()) {
            let mut m = Vec::with_capacity(b * n);
            for s in sets {
                m.extend(s.mask(tau)?.m.iter().map(|&v| if v { T::one() } else { T::zero() }));
            }
            Some(Tensor::new(&[b, n], m)?)
        } else {
            None
        };
        let (r_gt, t_gt) = if has_gt {
            let gts: Vec<RigidTransform> = sets.iter().map(|s| s.gt.unwrap()).collect();
            let r = gts.iter().flat_map(|g| g.r.iter().flatten().map(|&v| T::of(v)).collect::<Vec<_>>()).collect();
            let t = gts.iter().flat_map(|g| g.t.map(T::of)).collect();
            (Some(Tensor::new(&[b, 3, 3], r)?), Some(Tensor::new(&[b, 3], t)?))
        } else {
            (None, None)
        };
        Ok(Batch { x, y, mask, r_gt, t_gt })
    }

    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.x.shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(ratio: f64) -> GenSpec {
        GenSpec { inlier_ratio: ratio, ..GenSpec::default() }
    }

    #[test]
    fn clean_outlier_free_sets_are_exactly_recoverable() {
        let s = GenSpec { inlier_ratio: 1.0, noise_sigma: 0.0, rotation_deg: [10.0, 170.0], ..GenSpec::default() };
        for seed in 0..20 {
            let set = generate(&s, seed).unwrap();
            assert!(set.labels.as_ref().unwrap().iter().all(|&b| b));
            let est = geom::weighted_kabsch_full(&set.source(), &set.target(), &vec![1.0; set.len()]).unwrap();
            let gt = set.gt.unwrap();
            assert!(geom::rotation_error_iso(&est.r, &gt.r).to_radians() < 1e-5);
            assert!(geom::translation_error_l2(&est.t, &gt.t) < 1e-5);
        }
    }

    #[test]
    fn label_mean_matches_direct_count() {
        let s = GenSpec { n_corr: 1000, inlier_ratio: 0.5, noise_sigma: 0.0, ..GenSpec::default() };
        let set = generate(&s, 3).unwrap();
        let gt = set.gt.unwrap();
        let direct = set
            .x
            .iter()
            .zip(&set.y)
            .filter(|(x, y)| geom::norm(&geom::sub(&y.map(f64::from), &gt.apply(&x.map(f64::from)))) <= s.tau_label)
            .count();
        let labels = set.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&b| b).count(), direct);
        // 500 planted inliers plus the outliers that happen to land within tau.
        assert!(direct >= 500);
        let near_miss = direct - 500;
        assert!(near_miss < 50, "{near_miss} accidental inliers");
        let mean = direct as f64 / 1000.0;
        assert!((mean - 0.5).abs() <= near_miss as f64 / 1000.0 + 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec(0.3), 11).unwrap(), generate(&spec(0.3), 11).unwrap());
        assert_ne!(generate(&spec(0.3), 11).unwrap(), generate(&spec(0.3), 12).unwrap());
    }

    #[test]
    fn rotations_are_proper_and_cover_the_range() {
        let s = GenSpec { n_corr: 3, rotation_deg: [5.0, 45.0], ..GenSpec::default() };
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for seed in 0..1000 {
            let gt = generate(&s, seed).unwrap().gt.unwrap();
            assert!(gt.is_proper(1e-6));
            let a = geom::rotation_error_iso(&gt.r, &geom::IDENTITY);
            lo = lo.min(a);
            hi = hi.max(a);
        }
        assert!(lo >= 5.0 - 1e-4 && lo < 6.0, "min angle {lo}");
        assert!(hi <= 45.0 + 1e-4 && hi > 44.0, "max angle {hi}");
    }

    #[test]
    fn outlier_models() {
        for model in [OutlierModel::UniformInBox, OutlierModel::ShuffledPairing] {
            let s = GenSpec { n_corr: 400, inlier_ratio: 0.25, outliers: model, ..GenSpec::default() };
            let set = generate(&s, 5).unwrap();
            let frac = set.inlier_fraction().unwrap();
            assert!((0.25..0.4).contains(&frac), "{model:?}: {frac}");
        }
        let s = GenSpec {
            source: SourceDist::GaussianClusters { clusters: 3, spread: 0.05 },
            ..GenSpec::default()
        };
        assert_eq!(generate(&s, 1).unwrap().len(), 512);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            GenSpec { n_corr: 2, ..GenSpec::default() },
            GenSpec { inlier_ratio: 1.5, ..GenSpec::default() },
            GenSpec { rotation_deg: [10.0, 5.0], ..GenSpec::default() },
            GenSpec { translation: [-1.0, 1.0], ..GenSpec::default() },
            GenSpec { tau_label: 0.0, ..GenSpec::default() },
        ] {
            assert!(generate(&bad, 0).is_err());
        }
        // Underdetermined but legal: warns instead of failing.
        assert!(generate(&GenSpec { n_corr: 10, inlier_ratio: 0.1, ..GenSpec::default() }, 0).is_ok());
    }

    #[test]
    fn split_seeds_do_not_collide() {
        let mut seeds: Vec<u64> = ["train", "val", "test"]
            .iter()
            .flat_map(|s| (0..500).map(move |i| set_seed(9, s, i)))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 1500);
        let sets = generate_split(&GenSpec { n_corr: 8, ..GenSpec::default() }, &[0.3, 0.7], 4, 9, "val").unwrap();
        let ratios: Vec<f64> = sets.iter().map(|s| s.meta.inlier_ratio).collect();
        assert_eq!(ratios, [0.3, 0.7, 0.3, 0.7]);
        assert_eq!(ratio_grid(0.3, 0.7, 5).len(), 5);
        assert!((ratio_grid(0.3, 0.7, 5)[4] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn repose_keeps_structure_and_moves_the_pose() {
        let set = generate(&GenSpec::default(), 21).unwrap();
        let moved = repose(&set, [10.0, 40.0], [0.5, 1.0], 3).unwrap();
        let (old, new) = (set.gt.unwrap(), moved.gt.unwrap());
        assert_ne!(old, new);
        assert_eq!((&moved.x, &moved.labels, moved.meta), (&set.x, &set.labels, set.meta));
        let angle = geom::rotation_error_iso(&new.r, &geom::IDENTITY);
        assert!((10.0 - 1e-3..=40.0 + 1e-3).contains(&angle), "{angle}");
        assert!((0.5 - 1e-6..=1.0 + 1e-6).contains(&geom::norm(&new.t)));
        let before = set.residuals(&old);
        let after = moved.residuals(&new);
        assert!(before.iter().zip(&after).all(|(a, b)| (a - b).abs() < 1e-5));
        assert_eq!(moved.relabel(DEFAULT_TAU_LABEL).unwrap(), set.labels.clone().unwrap());
        assert_eq!(repose(&set, [10.0, 40.0], [0.5, 1.0], 3).unwrap(), moved);
        let unposed = CorrespondenceSet { gt: None, ..set };
        assert!(repose(&unposed, [0.0, 1.0], [0.0, 1.0], 0).is_err());
    }

    #[test]
    fn batch_stacks_sets() {
        let a = generate(&GenSpec { n_corr: 5, ..GenSpec::default() }, 1).unwrap();
        let b = generate(&GenSpec { n_corr: 5, ..GenSpec::default() }, 2).unwrap();
        let batch = Batch::<f32>::from_sets(&[&a, &b], DEFAULT_TAU_LABEL).unwrap();
        assert_eq!(batch.x.shape(), &[2, 5, 3]);
        assert_eq!(batch.y.data()[15..18], b.y[0]);
        assert_eq!(batch.mask.as_ref().unwrap().shape(), &[2, 5]);
        assert_eq!(batch.r_gt.as_ref().unwrap().data()[9] as f64, b.gt.unwrap().r[0][0]);
        let c = generate(&GenSpec { n_corr: 6, ..GenSpec::default() }, 3).unwrap();
        assert!(Batch::<f32>::from_sets(&[&a, &c], DEFAULT_TAU_LABEL).is_err());
        let short = CorrespondenceSet::new(vec![[0.0; 3]; 2], vec![[0.0; 3]; 2]);
        assert!(short.is_err());
    }

    proptest! {
        #[test]
        fn stored_labels_equal_relabelling(seed in any::<u64>(), ratio in 0.0f64..1.0) {
            let set = generate(&GenSpec { n_corr: 64, inlier_ratio: ratio, ..GenSpec::default() }, seed).unwrap();
            prop_assert_eq!(set.labels.clone().unwrap(), set.relabel(DEFAULT_TAU_LABEL).unwrap());
        }
    }
}
