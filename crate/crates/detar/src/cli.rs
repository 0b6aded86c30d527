//! The `detar` command line.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use detar_core::eval::{baseline_by_name, ModelSolver, Solver};
use detar_core::nn::{BlockKind, RHead, THead};
use detar_core::train::{validate, EpochLog, PoseAugment, Trainer};

use crate::checkpoint;
use crate::config::{parse_override, RunConfig};
use crate::crsp;
use crate::error::{Error, Result};
use crate::manifest;
use crate::pool::worker_count;
use crate::runner;

pub const CHECKPOINT_FILE: &str = "checkpoint.dtrn";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "detar", version, about = "Correspondence-based rigid registration: data, training, evaluation")]
pub struct Cli {
    /// Flat dotted-key JSON config applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits of synthetic correspondence sets.
    Gen(GenArgs),
    /// Train the network and write a checkpoint plus a JSON-lines metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a classical baseline on a split.
    Eval(EvalArgs),
    /// Register one correspondence set with a trained checkpoint.
    Register(RegisterArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutlierArg {
    Uniform,
    Shuffled,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inlier ratio of every set; replaces the ratio grid.
    #[arg(long, value_delimiter = ',')]
    pub inlier_ratio: Option<Vec<f64>>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub n_corr: Option<usize>,
    #[arg(long, value_enum)]
    pub outliers: Option<OutlierArg>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum THeadArg {
    Regress,
    Svd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RHeadArg {
    Svd,
    Regress,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BlocksArg {
    Sca,
    Cn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub t_head: Option<THeadArg>,
    #[arg(long, value_enum)]
    pub r_head: Option<RHeadArg>,
    /// Coordinate-only classifier input.
    #[arg(long)]
    pub no_ceu: bool,
    #[arg(long, value_enum)]
    pub blocks: Option<BlocksArg>,
    /// Give every training set a fresh pose each epoch, drawn from the pose
    /// ranges the data was generated with.
    #[arg(long)]
    pub augment: bool,
    /// Continue from this checkpoint; its model and seed take precedence.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Ransac,
    Icp,
    Procrustes,
    #[value(hide = true)]
    Oracle,
    #[value(hide = true)]
    Identity,
}

impl BaselineArg {
    fn name(self) -> &'static str {
        match self {
            BaselineArg::Ransac => "ransac",
            BaselineArg::Icp => "icp",
            BaselineArg::Procrustes => "procrustes",
            BaselineArg::Oracle => "oracle",
            BaselineArg::Identity => "identity",
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("solver").required(true).args(["checkpoint", "baseline"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Dataset directory or a split manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// RANSAC sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A CRSP file.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

fn set(pairs: &mut Vec<(String, Value)>, key: &str, v: Option<impl serde::Serialize>) {
    if let Some(v) = v {
        pairs.push((key.to_string(), serde_json::to_value(v).expect("plain values serialize")));
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let pairs = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    cfg.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
}

fn finish(cfg: RunConfig, pairs: Vec<(String, Value)>) -> Result<RunConfig> {
    let cfg = cfg.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig, extra: &[(&str, Value)]) -> Result<Value> {
    let mut flat: Map<String, Value> = cfg.to_flat()?;
    for (k, v) in extra {
        flat.insert(format!("run.{k}"), v.clone());
    }
    Ok(Value::Object(flat))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(Error::io(path))
}

pub fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let mut p = Vec::new();
    set(&mut p, "data.seed", a.seed);
    set(&mut p, "data.ratios", a.inlier_ratio.clone());
    set(&mut p, "data.spec.noise_sigma", a.noise_sigma);
    set(&mut p, "data.spec.n_corr", a.n_corr);
    set(
        &mut p,
        "data.spec.outliers",
        a.outliers.map(|o| match o {
            OutlierArg::Uniform => "uniform_in_box",
            OutlierArg::Shuffled => "shuffled_pairing",
        }),
    );
    set(&mut p, "data.counts.train", a.train);
    set(&mut p, "data.counts.val", a.val);
    set(&mut p, "data.counts.test", a.test);
    let cfg = finish(base_config(cli)?, p)?;
    let d = &cfg.data;
    let config = echo(&cfg, &[("out", path_value(&a.out))])?;
    let ms = manifest::make_split(&a.out, &d.spec, &d.ratios, &d.counts, d.seed, worker_count(), Some(config))?;
    for m in &ms {
        println!("{}: {} sets -> {}", m.split, m.files.len(), manifest::manifest_path(&a.out, &m.split).display());
    }
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    let l = &log.train;
    let mut s = format!(
        "epoch {:3} step {:6}  loss {:.4} (t {:.4} cls {:.4} align {:.4} drift {:.4})",
        log.epoch, log.step, l.total, l.trans, l.cls, l.align, l.drift
    );
    if let Some(v) = &log.val {
        s += &format!("  val MRE {:.3} MTE {:.4} recall {:.1} acc {:.1}", v.mre, v.mte, v.recall, v.accuracy);
    }
    s
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut p = Vec::new();
    set(&mut p, "train.seed", a.seed);
    set(&mut p, "train.epochs", a.epochs);
    set(&mut p, "train.max_steps", a.max_steps);
    set(&mut p, "train.batch_size", a.batch_size);
    set(&mut p, "train.lr", a.lr);
    set(&mut p, "model.t_head", a.t_head.map(|h| match h {
        THeadArg::Regress => THead::Regress,
        THeadArg::Svd => THead::Svd,
    }));
    set(&mut p, "model.r_head", a.r_head.map(|h| match h {
        RHeadArg::Svd => RHead::Svd,
        RHeadArg::Regress => RHead::Regress,
    }));
    set(&mut p, "model.use_ceu", a.no_ceu.then_some(false));
    set(&mut p, "model.blocks", a.blocks.map(|b| match b {
        BlocksArg::Sca => BlockKind::Sca,
        BlocksArg::Cn => BlockKind::Cn,
    }));
    let mut cfg = finish(base_config(cli)?, p)?;

    let threads = worker_count();
    let (train_root, train_manifest) = manifest::open_split(&a.data, "train")?;
    let train: Vec<_> = manifest::load_sets(&train_root, &train_manifest, threads)?.into_iter().map(|(_, s)| s).collect();
    if a.augment {
        let g = &train_manifest.gen;
        cfg.train.augment = Some(PoseAugment { rotation_deg: g.rotation_deg, translation: g.translation });
        cfg.train.validate()?;
    }
    let val: Vec<_> = match manifest::open_split(&a.data, "val") {
        Ok((root, m)) => manifest::load_sets(&root, &m, threads)?.into_iter().map(|(_, s)| s).collect(),
        Err(Error::Io { .. }) => {
            log::warn!("no validation split in {}", a.data.display());
            Vec::new()
        }
        Err(e) => return Err(e),
    };

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load::<f32>(path)?;
            if ck.params.config != cfg.model {
                log::warn!("resuming with the checkpoint's model configuration; model flags are ignored");
            }
            cfg.model = ck.params.config.clone();
            cfg.train.seed = ck.seed;
            Trainer::resume(ck, cfg.train.clone())?
        }
        None => Trainer::<f32>::new(&cfg.model, cfg.train.clone())?,
    };
    if let Some(n) = train.first().map(|s| s.len()) {
        if n != cfg.model.n_corr {
            log::warn!("training sets have {n} correspondences, model.n_corr is {}", cfg.model.n_corr);
        }
    }

    fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let mut extra = vec![("data", path_value(&a.data)), ("out", path_value(&a.out))];
    if let Some(r) = &a.resume {
        extra.push(("resume", path_value(r)));
    }
    let config = echo(&cfg, &extra)?;
    write_json(&a.out.join(CONFIG_FILE), &config)?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path).map_err(Error::io(&metrics_path))?;
    let mut line = |v: Value| -> Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(&v)?).map_err(Error::io(&metrics_path))
    };
    line(json!({ "config": config, "start_step": trainer.step }))?;

    let ck_path = a.out.join(CHECKPOINT_FILE);
    while !trainer.is_done() {
        let epoch = trainer.epoch;
        let Some(loss) = trainer.run_epoch(&train)? else { break };
        let val = if val.is_empty() { None } else { Some(validate(&trainer.params, &val, trainer.cfg.batch_size)?) };
        let log = EpochLog { epoch, step: trainer.step, train: loss, val };
        println!("{}", epoch_line(&log));
        line(serde_json::to_value(&log)?)?;
        checkpoint::save(&ck_path, &trainer.checkpoint())?;
    }
    checkpoint::save(&ck_path, &trainer.checkpoint())?;
    println!("checkpoint at step {} -> {}", trainer.step, ck_path.display());
    Ok(())
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut cfg = finish(base_config(cli)?, Vec::new())?;
    let (solver, source): (Box<dyn Solver>, (&str, Value)) = match (&a.checkpoint, a.baseline) {
        (Some(path), _) => {
            let ck = checkpoint::load::<f32>(path)?;
            cfg.model = ck.params.config.clone();
            (Box::new(ModelSolver { params: ck.params }), ("checkpoint", path_value(path)))
        }
        (None, Some(b)) => (baseline_by_name(b.name(), a.seed)?, ("baseline", Value::String(b.name().into()))),
        (None, None) => return Err(Error::Config("either --checkpoint or --baseline is required".into())),
    };
    let threads = worker_count();
    let sets = manifest::load_split(&a.data, &a.split, threads)?;
    let report = runner::evaluate(solver.as_ref(), &sets, &cfg.eval, threads)?;
    let config = echo(&cfg, &[source, ("data", path_value(&a.data)), ("split", Value::String(a.split.clone())), ("seed", json!(a.seed))])?;
    runner::write_report(&a.out, &report, config)?;
    println!("{}", runner::summary(&report));
    Ok(())
}

pub fn cmd_register(cli: &Cli, a: &RegisterArgs) -> Result<()> {
    let mut cfg = finish(base_config(cli)?, Vec::new())?;
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    cfg.model = ck.params.config.clone();
    let set = crsp::read_set(&a.input)?;
    let config = echo(&cfg, &[("checkpoint", path_value(&a.checkpoint)), ("input", path_value(&a.input))])?;
    let reg = runner::register(&ck.params, &set, config)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    write_json(&a.out, &reg)?;
    let kept = reg.probabilities.iter().filter(|&&p| p > 0.5).count();
    println!("t = {:?}  {} of {} correspondences above 0.5 -> {}", reg.transform.t, kept, set.len(), a.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Register(a) => cmd_register(cli, a),
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors come back as clap errors.
pub fn run_args<I, S>(args: I) -> std::result::Result<(), Box<dyn std::error::Error>>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli)?;
    Ok(())
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}
