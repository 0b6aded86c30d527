//! Threaded evaluation and the files it writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use detar_core::data::CorrespondenceSet;
use detar_core::eval::{pose_recall, EvalOptions, EvalReport, PairRecord, Solver};
use detar_core::geom::RigidTransform;
use detar_core::nn::{infer, logit_weights, ModelParams};
use detar_core::Real;

use crate::error::{Error, Result};
use crate::pool::parallel_map;

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "recall_curve.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const RECORDS_FILE: &str = "records.csv";

/// Points on the recall curve written to CSV.
pub const CURVE_POINTS: usize = 20;

/// Runs `solver` on every set across `threads` workers. Records keep input
/// order, so a deterministic solver gives the same report for any thread count
/// except for the runtimes.
pub fn evaluate(solver: &dyn Solver, sets: &[(String, CorrespondenceSet)], opts: &EvalOptions, threads: usize) -> Result<EvalReport> {
    let records = parallel_map(sets, threads, |_, (id, set)| -> Result<PairRecord> {
        let start = Instant::now();
        let sol = solver.solve(set)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(PairRecord::new(id.clone(), set, &sol, ms)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(solver.name(), records, opts.clone())?)
}

/// `report.json` content: the report plus the effective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub config: Value,
    pub report: EvalReport,
}

/// `(fraction, rot_deg, trans, recall)` with both thresholds scaled jointly up
/// to the recall corner.
pub fn recall_curve(report: &EvalReport, points: usize) -> Result<Vec<(f64, f64, f64, f64)>> {
    let errors: Vec<(f64, f64)> = report.records.iter().map(|r| (r.re_deg, r.te)).collect();
    let o = &report.options;
    (0..=points)
        .map(|k| {
            let f = k as f64 / points as f64;
            let (r, t) = (f * o.recall_deg, f * o.recall_trans);
            Ok((f, r, t, pose_recall(&errors, r, t)?))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn curve_csv(report: &EvalReport) -> Result<String> {
    let mut s = String::from("fraction,rot_deg,trans,recall\n");
    for (f, r, t, rec) in recall_curve(report, CURVE_POINTS)? {
        writeln!(s, "{f},{r},{t},{rec}").expect("string write");
    }
    Ok(s)
}

/// Empty bins leave the error columns blank.
pub fn bins_csv(report: &EvalReport) -> String {
    let mut s = String::from("lo,hi,count,mre,mte\n");
    for b in &report.bins {
        writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, opt(b.mre), opt(b.mte)).expect("string write");
    }
    s
}

pub fn records_csv(report: &EvalReport) -> String {
    let mut s = String::from("id,re_deg,te,precision,recall,accuracy,inlier_ratio,runtime_ms,failed\n");
    for r in &report.records {
        let c = r.class;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.re_deg,
            r.te,
            opt(c.map(|c| c.precision)),
            opt(c.map(|c| c.recall)),
            opt(c.map(|c| c.accuracy)),
            r.inlier_ratio,
            r.runtime_ms,
            r.failed
        )
        .expect("string write");
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes the report JSON and the three CSV tables into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, config: Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let file = ReportFile { config, report: report.clone() };
    write(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(&file)? + "\n"))?;
    write(&dir.join(CURVE_FILE), &curve_csv(report)?)?;
    write(&dir.join(BINS_FILE), &bins_csv(report))?;
    write(&dir.join(RECORDS_FILE), &records_csv(report))
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let file: ReportFile = serde_json::from_str(&text)?;
    if !file.report.is_consistent() {
        return Err(Error::Invalid(format!("{}: aggregates disagree with the per-pair records", path.display())));
    }
    Ok(file)
}

pub fn summary(report: &EvalReport) -> String {
    let a = &report.aggregates;
    let mut s = format!(
        "{}: {} pairs ({} failed)  MRE {:.3} deg  MTE {:.4}  recall {:.1}%  mAP {:.1}%",
        report.solver, a.pairs, a.failures, a.mre, a.mte, a.recall, a.map
    );
    if let Some(acc) = a.mean_accuracy {
        write!(s, "  acc {acc:.1}%").expect("string write");
    }
    write!(s, "  {:.2} ms/pair", a.mean_runtime_ms).expect("string write");
    s
}

/// Output of the `register` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Sigmoid of each correspondence's logit.
    pub probabilities: Vec<f64>,
    /// Weights fed to the rotation solve.
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
    /// The weighted rotation problem was degenerate and the identity was used.
    pub degenerate: bool,
    pub runtime_ms: f64,
    pub config: Value,
}

pub fn register<T: Real>(params: &ModelParams<T>, set: &CorrespondenceSet, config: Value) -> Result<Registration> {
    let start = Instant::now();
    let out = infer(params, set)?;
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let logits: Vec<f64> = out.logits.data().iter().map(|l| l.f64()).collect();
    Ok(Registration {
        transform: out.transform(0),
        probabilities: out.probabilities(0),
        weights: logit_weights(&logits),
        logits,
        degenerate: out.degenerate[0],
        runtime_ms,
        config,
    })
}
