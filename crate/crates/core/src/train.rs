//! Mini-batch training with Adam, validation metrics and resumable state.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{repose, Batch, CorrespondenceSet, DEFAULT_TAU_LABEL};
use crate::error::{bail, Error, Result};
use crate::eval::{classification_metrics, pose_recall, RECALL_DEG, RECALL_TRANS};
use crate::geom;
use crate::loss::{model_losses, total_loss, LossWeights};
use crate::nn::{forward, forward_graph, DetarConfig, ModelParams, Net, BN_MOMENTUM};
use crate::optim::{adam_step, AdamState};
use crate::rng;
use crate::tensor::{BnMode, Graph};
use crate::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Multiply the learning rate by `factor` every `every_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub every_epochs: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub tau_label: f64,
    pub bn_momentum: f64,
    /// Rescale gradients to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub lr_decay: Option<LrDecay>,
    /// Give every training set a fresh pose each epoch.
    pub augment: Option<PoseAugment>,
}

/// Pose ranges for [`TrainConfig::augment`]; see [`crate::data::repose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseAugment {
    pub rotation_deg: [f64; 2],
    pub translation: [f64; 2],
}

impl Default for PoseAugment {
    fn default() -> Self {
        let spec = crate::data::GenSpec::default();
        PoseAugment { rotation_deg: spec.rotation_deg, translation: spec.translation }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            max_steps: None,
            tau_label: DEFAULT_TAU_LABEL,
            bn_momentum: BN_MOMENTUM,
            grad_clip: None,
            lr_decay: None,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            bail!(Config, "bn_momentum must lie in [0, 1), got {}", self.bn_momentum);
        }
        if !(self.tau_label > 0.0) {
            bail!(Config, "tau_label must be positive, got {}", self.tau_label);
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            bail!(Config, "grad_clip must be positive");
        }
        if self.lr_decay.is_some_and(|d| d.every_epochs == 0 || !(d.factor > 0.0)) {
            bail!(Config, "lr_decay needs every_epochs ≥ 1 and a positive factor");
        }
        if let Some(a) = self.augment {
            let ok = |[lo, hi]: [f64; 2]| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
            if !(ok(a.rotation_deg) && a.rotation_deg[1] <= 180.0 && ok(a.translation)) {
                bail!(Config, "augment ranges must be ordered, non-negative and rotations at most 180 degrees");
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: u64) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi(i32::try_from(epoch / d.every_epochs).unwrap_or(i32::MAX)),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub trans: f64,
    pub cls: f64,
    pub align: f64,
    pub drift: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues, w: f64) {
        self.total += w * o.total;
        self.trans += w * o.trans;
        self.cls += w * o.cls;
        self.align += w * o.align;
        self.drift += w * o.drift;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub mre: f64,
    pub mte: f64,
    pub recall: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    /// Mean over the batches of this epoch, weighted by batch size.
    pub train: LossValues,
    pub val: Option<ValMetrics>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub params: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
    pub seed: u64,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already taken from the current epoch.
    pub epoch_step: u64,
}

pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub epoch_step: u64,
}

fn global_norm<T: Real>(grads: &alloc::collections::BTreeMap<alloc::string::String, crate::tensor::Tensor<T>>) -> f64 {
    let sq: Vec<f64> = grads.values().flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64())).collect();
    crate::sum::sum(&sq).sqrt()
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &DetarConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(model, cfg.seed)?;
        let adam = AdamState::new(cfg.lr);
        Ok(Trainer { params, adam, cfg, step: 0, epoch: 0, epoch_step: 0 })
    }

    pub fn resume(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        ckpt.params.check()?;
        let mut adam = ckpt.adam.unwrap_or_else(|| AdamState::new(cfg.lr));
        adam.validate()?;
        adam.lr = cfg.lr;
        let cfg = TrainConfig { seed: ckpt.seed, ..cfg };
        Ok(Trainer { params: ckpt.params, adam, cfg, step: ckpt.step, epoch: ckpt.epoch, epoch_step: ckpt.epoch_step })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            seed: self.cfg.seed,
            step: self.step,
            epoch: self.epoch,
            epoch_step: self.epoch_step,
        }
    }

    fn step_limit_reached(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    pub fn is_done(&self) -> bool {
        self.step_limit_reached() || self.epoch >= self.cfg.epochs
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossValues> {
        let mut g = Graph::new();
        let (total, parts) = {
            let net = Net::bind(&mut g, &self.params, BnMode::Train);
            let fv = forward_graph(&mut g, &net, &batch.x, &batch.y)?;
            let parts = model_losses(&mut g, &fv, batch)?;
            (total_loss(&mut g, &parts, &self.cfg.weights)?, parts)
        };
        let [trans, cls, align, drift] = parts.values(&g);
        let values = LossValues { total: g.value(total).item().f64(), trans, cls, align, drift };
        if ![values.total, trans, cls, align, drift].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("total {} trans {} cls {} align {} drift {}", values.total, trans, cls, align, drift),
            });
        }
        let mut grads = g.backward(total)?.params(&g);
        if let Some(clip) = self.cfg.grad_clip {
            let norm = global_norm(&grads);
            if norm > clip {
                let s = T::of(clip / norm);
                grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        let stats = g.take_bn_stats();
        self.adam.lr = self.cfg.lr_at(self.epoch);
        adam_step(&mut self.params.tensors, &grads, &mut self.adam)?;
        self.params.update_bn(&stats, self.cfg.bn_momentum)?;
        self.step += 1;
        Ok(values)
    }

    /// Visiting order of `n` training sets in `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::indexed(self.cfg.seed, "train.shuffle", epoch));
        order
    }

    /// Finishes the current epoch; `None` if the step limit stopped it before any batch ran.
    pub fn run_epoch(&mut self, sets: &[CorrespondenceSet]) -> Result<Option<LossValues>> {
        if sets.is_empty() {
            bail!(Empty, "no training sets");
        }
        let order = self.epoch_order(sets.len(), self.epoch);
        let bs = self.cfg.batch_size;
        let mut acc = LossValues::default();
        let mut seen = 0usize;
        let start = usize::try_from(self.epoch_step).unwrap_or(usize::MAX).saturating_mul(bs);
        for chunk in order.get(start..).unwrap_or(&[]).chunks(bs) {
            if self.step_limit_reached() {
                return Ok((seen > 0).then(|| scaled(acc, seen)));
            }
            let batch = match self.cfg.augment {
                None => Batch::from_sets(&chunk.iter().map(|&i| &sets[i]).collect::<Vec<_>>(), self.cfg.tau_label)?,
                Some(a) => {
                    let posed = chunk
                        .iter()
                        .map(|&i| {
                            let seed = rng::derive_seed(self.cfg.seed, &format!("train.augment.{}.{}", self.epoch, i));
                            repose(&sets[i], a.rotation_deg, a.translation, seed)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Batch::from_sets(&posed.iter().collect::<Vec<_>>(), self.cfg.tau_label)?
                }
            };
            let v = self.train_step(&batch)?;
            acc.add(&v, chunk.len() as f64);
            seen += chunk.len();
            self.epoch_step += 1;
        }
        self.epoch += 1;
        self.epoch_step = 0;
        Ok((seen > 0).then(|| scaled(acc, seen)))
    }

    /// Trains until the epoch or step budget is spent, reporting after every epoch.
    pub fn fit(
        &mut self,
        train: &[CorrespondenceSet],
        val: &[CorrespondenceSet],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            bail!(Empty, "no training sets");
        }
        let mut logs = Vec::new();
        while !self.is_done() {
            let epoch = self.epoch;
            let Some(loss) = self.run_epoch(train)? else { break };
            let val = if val.is_empty() { None } else { Some(validate(&self.params, val, self.cfg.batch_size)?) };
            let log = EpochLog { epoch, step: self.step, train: loss, val };
            log::info!("epoch {} step {} loss {:.5}", epoch, self.step, loss.total);
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn scaled(v: LossValues, n: usize) -> LossValues {
    let mut out = LossValues::default();
    out.add(&v, 1.0 / n as f64);
    out
}

/// Inference-mode pose and classification metrics over `sets`.
pub fn validate<T: Real>(params: &ModelParams<T>, sets: &[CorrespondenceSet], batch_size: usize) -> Result<ValMetrics> {
    if sets.is_empty() {
        bail!(Empty, "no validation sets");
    }
    let mut errors = Vec::with_capacity(sets.len());
    let mut acc = 0.0;
    for chunk in sets.chunks(batch_size.max(1)) {
        let refs: Vec<&CorrespondenceSet> = chunk.iter().collect();
        let batch = Batch::from_sets(&refs, DEFAULT_TAU_LABEL)?;
        let out = forward(params, &batch, BnMode::Eval)?;
        let n = batch.x.shape()[1];
        for (b, set) in chunk.iter().enumerate() {
            let Some(gt) = set.gt else { bail!(InvalidArgument, "validation set without ground truth") };
            let est = out.transform(b);
            errors.push((geom::rotation_error_iso(&est.r, &gt.r), geom::translation_error_l2(&est.t, &gt.t)));
            let labels = match &set.labels {
                Some(l) => l.clone(),
                None => set.mask(DEFAULT_TAU_LABEL)?.m,
            };
            let logits: Vec<f64> = out.logits.data()[b * n..(b + 1) * n].iter().map(|v| v.f64()).collect();
            acc += classification_metrics(&logits, &labels)?.accuracy;
        }
    }
    let k = errors.len() as f64;
    Ok(ValMetrics {
        mre: errors.iter().map(|e| e.0).sum::<f64>() / k,
        mte: errors.iter().map(|e| e.1).sum::<f64>() / k,
        recall: pose_recall(&errors, RECALL_DEG, RECALL_TRANS)?,
        accuracy: acc / k,
    })
}

/// Fresh training run; returns the final state and one log entry per epoch.
pub fn train_loop<T: Real>(
    model: &DetarConfig,
    cfg: &TrainConfig,
    train: &[CorrespondenceSet],
    val: &[CorrespondenceSet],
) -> Result<(Checkpoint<T>, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let logs = t.fit(train, val, |_| {})?;
    Ok((t.checkpoint(), logs))
}
