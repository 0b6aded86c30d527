//! Registration metrics, robustness bins and the per-pair report.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::baselines::{icp, procrustes_all, ransac, IcpConfig, RansacConfig};
use crate::data::CorrespondenceSet;
use crate::error::{bail, Result};
use crate::geom::{self, RigidTransform};
use crate::nn::{infer, ModelParams};
use crate::Real;

/// Rotation and translation thresholds of the recall metric.
pub const RECALL_DEG: f64 = 5.0;
pub const RECALL_TRANS: f64 = 0.15;
pub const MAP_STEPS: usize = 5;

/// Percentage of pairs with `RE ≤ θ_r` and `TE ≤ θ_t`.
pub fn pose_recall(errors: &[(f64, f64)], theta_r: f64, theta_t: f64) -> Result<f64> {
    if errors.is_empty() {
        bail!(Empty, "pose_recall over no pairs");
    }
    let hits = errors.iter().filter(|(r, t)| *r <= theta_r && *t <= theta_t).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Mean recall over `steps` jointly scaled thresholds `(k·max_r/steps, k·max_t/steps)`.
pub fn pose_map(errors: &[(f64, f64)], max_r: f64, max_t: f64, steps: usize) -> Result<f64> {
    if steps == 0 {
        bail!(InvalidArgument, "pose_map needs at least one step");
    }
    let mut total = 0.0;
    for k in 1..=steps {
        let f = k as f64 / steps as f64;
        total += pose_recall(errors, f * max_r, f * max_t)?;
    }
    Ok(total / steps as f64)
}

/// Percentages; a ratio with an empty denominator is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Positive prediction means `logit > 0`.
pub fn classification_metrics(logits: &[f64], labels: &[bool]) -> Result<ClassMetrics> {
    if logits.len() != labels.len() {
        bail!(Shape, "{} logits vs {} labels", logits.len(), labels.len());
    }
    if logits.is_empty() {
        bail!(Empty, "classification metrics over no correspondences");
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0, 0, 0, 0);
    for (&l, &y) in logits.iter().zip(labels) {
        let p = l > 0.0;
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        correct += usize::from(p == y);
    }
    Ok(ClassMetrics {
        precision: percent(tp, tp + fp),
        recall: percent(tp, tp + fneg),
        accuracy: percent(correct, logits.len()),
    })
}

/// Outcome of one solver on one correspondence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub re_deg: f64,
    pub te: f64,
    /// Only for solvers that classify correspondences.
    pub class: Option<ClassMetrics>,
    pub inlier_ratio: f64,
    pub runtime_ms: f64,
    pub failed: bool,
}

/// What a solver returns for one set.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub transform: RigidTransform,
    pub logits: Option<Vec<f64>>,
    pub failed: bool,
}

impl PairRecord {
    pub fn new(id: impl Into<String>, set: &CorrespondenceSet, sol: &Solution, runtime_ms: f64) -> Result<Self> {
        let Some(gt) = set.gt else { bail!(InvalidArgument, "set has no ground-truth transform") };
        let class = match (&sol.logits, &set.labels) {
            (Some(l), Some(y)) => Some(classification_metrics(l, y)?),
            _ => None,
        };
        let inlier_ratio = match &set.labels {
            Some(y) if !y.is_empty() => y.iter().filter(|&&v| v).count() as f64 / y.len() as f64,
            _ => set.meta.inlier_ratio,
        };
        Ok(PairRecord {
            id: id.into(),
            re_deg: geom::rotation_error_iso(&sol.transform.r, &gt.r),
            te: geom::translation_error_l2(&sol.transform.t, &gt.t),
            class,
            inlier_ratio,
            runtime_ms,
            failed: sol.failed,
        })
    }
}

/// Mean errors of the records whose inlier ratio falls in `[lo, hi)`; the
/// last bin also takes `hi`. `None` marks an empty bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mre: Option<f64>,
    pub mte: Option<f64>,
}

pub fn robustness_bins(records: &[PairRecord], edges: &[f64]) -> Result<Vec<RatioBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        bail!(InvalidArgument, "bin edges must be at least two increasing values: {:?}", edges);
    }
    let last = edges.len() - 2;
    Ok(edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let members: Vec<&PairRecord> = records
                .iter()
                .filter(|r| r.inlier_ratio >= w[0] && (r.inlier_ratio < w[1] || (i == last && r.inlier_ratio == w[1])))
                .collect();
            let n = members.len();
            let mean = |f: fn(&PairRecord) -> f64| (n > 0).then(|| members.iter().map(|r| f(r)).sum::<f64>() / n as f64);
            RatioBin { lo: w[0], hi: w[1], count: n, mre: mean(|r| r.re_deg), mte: mean(|r| r.te) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub recall_deg: f64,
    pub recall_trans: f64,
    pub map_steps: usize,
    pub bin_edges: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            recall_deg: RECALL_DEG,
            recall_trans: RECALL_TRANS,
            map_steps: MAP_STEPS,
            bin_edges: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// Summary over every pair, failures included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub pairs: usize,
    pub failures: usize,
    pub mre: f64,
    pub mte: f64,
    pub recall: f64,
    pub map: f64,
    pub mean_accuracy: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_inlier_recall: Option<f64>,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub solver: String,
    pub options: EvalOptions,
    pub aggregates: Aggregates,
    pub bins: Vec<RatioBin>,
    pub records: Vec<PairRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

impl Aggregates {
    pub fn from_records(records: &[PairRecord], opts: &EvalOptions) -> Result<Self> {
        let errors: Vec<(f64, f64)> = records.iter().map(|r| (r.re_deg, r.te)).collect();
        let classes: Vec<ClassMetrics> = records.iter().filter_map(|r| r.class).collect();
        let class_mean = |f: fn(&ClassMetrics) -> f64| {
            (classes.len() == records.len()).then(|| mean(classes.iter().map(f))).flatten()
        };
        Ok(Aggregates {
            pairs: records.len(),
            failures: records.iter().filter(|r| r.failed).count(),
            mre: mean(errors.iter().map(|e| e.0)).unwrap_or(0.0),
            mte: mean(errors.iter().map(|e| e.1)).unwrap_or(0.0),
            recall: pose_recall(&errors, opts.recall_deg, opts.recall_trans)?,
            map: pose_map(&errors, opts.recall_deg, opts.recall_trans, opts.map_steps)?,
            mean_accuracy: class_mean(|c| c.accuracy),
            mean_precision: class_mean(|c| c.precision),
            mean_inlier_recall: class_mean(|c| c.recall),
            mean_runtime_ms: mean(records.iter().map(|r| r.runtime_ms)).unwrap_or(0.0),
        })
    }
}

impl EvalReport {
    pub fn from_records(solver: impl Into<String>, records: Vec<PairRecord>, opts: EvalOptions) -> Result<Self> {
        let aggregates = Aggregates::from_records(&records, &opts)?;
        let bins = robustness_bins(&records, &opts.bin_edges)?;
        Ok(EvalReport { solver: solver.into(), options: opts, aggregates, bins, records })
    }

    /// Whether the stored aggregates and bins match a recomputation from the records.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_records(&self.records, &self.options).is_ok_and(|a| a == self.aggregates)
            && robustness_bins(&self.records, &self.options.bin_edges).is_ok_and(|b| b == self.bins)
    }
}

/// Anything that maps a correspondence set to a rigid transform.
pub trait Solver: Send + Sync {
    fn name(&self) -> String;
    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution>;
}

fn plain(transform: RigidTransform) -> Solution {
    Solution { transform, logits: None, failed: false }
}

/// Returns the ground truth.
pub struct OracleSolver;

impl Solver for OracleSolver {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution> {
        let Some(gt) = set.gt else { bail!(InvalidArgument, "oracle needs a ground-truth transform") };
        Ok(Solution { transform: gt, logits: set.labels.as_ref().map(|l| l.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect()), failed: false })
    }
}

/// Always the identity.
pub struct IdentitySolver;

impl Solver for IdentitySolver {
    fn name(&self) -> String {
        "identity".into()
    }

    fn solve(&self, _set: &CorrespondenceSet) -> Result<Solution> {
        Ok(plain(RigidTransform::identity()))
    }
}

pub struct RansacSolver(pub RansacConfig);

impl Solver for RansacSolver {
    fn name(&self) -> String {
        "ransac".into()
    }

    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution> {
        let r = ransac(&set.source(), &set.target(), &self.0)?;
        let logits = r.inliers.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
        Ok(Solution { transform: r.transform, logits: Some(logits), failed: r.failed })
    }
}

pub struct IcpSolver(pub IcpConfig);

impl Solver for IcpSolver {
    fn name(&self) -> String {
        "icp".into()
    }

    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution> {
        let r = icp(&set.source(), &set.target(), &self.0, &RigidTransform::identity())?;
        Ok(plain(r.transform))
    }
}

pub struct ProcrustesSolver;

impl Solver for ProcrustesSolver {
    fn name(&self) -> String {
        "procrustes".into()
    }

    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution> {
        match procrustes_all(set) {
            Ok(t) => Ok(plain(t)),
            Err(crate::error::Error::Degenerate(_)) => {
                Ok(Solution { transform: RigidTransform::identity(), logits: None, failed: true })
            }
            Err(e) => Err(e),
        }
    }
}

/// The trained network in inference mode.
pub struct ModelSolver<T> {
    pub params: ModelParams<T>,
}

impl<T: Real> Solver for ModelSolver<T> {
    fn name(&self) -> String {
        "detarnet".into()
    }

    fn solve(&self, set: &CorrespondenceSet) -> Result<Solution> {
        let out = infer(&self.params, set)?;
        Ok(Solution {
            transform: out.transform(0),
            logits: Some(out.logits.data().iter().map(|l| l.f64()).collect()),
            failed: out.degenerate[0],
        })
    }
}

/// Boxed solver by name; `ransac`, `icp`, `procrustes`, `oracle` or `identity`.
pub fn baseline_by_name(name: &str, seed: u64) -> Result<Box<dyn Solver>> {
    Ok(match name {
        "ransac" => Box::new(RansacSolver(RansacConfig { seed, ..Default::default() })),
        "icp" => Box::new(IcpSolver(IcpConfig::default())),
        "procrustes" => Box::new(ProcrustesSolver),
        "oracle" => Box::new(OracleSolver),
        "identity" => Box::new(IdentitySolver),
        other => bail!(InvalidArgument, "unknown baseline `{}`", other),
    })
}
