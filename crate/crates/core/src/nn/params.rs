use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{BlockKind, DetarConfig, RHead, THead};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::{BnBatchStats, Tensor};
use crate::Real;

/// Weight of the old running statistic in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        BnRunning { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Trainable tensors plus batch-norm running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: DetarConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub bn: BTreeMap<String, BnRunning<T>>,
}

struct SpecBuilder {
    params: Vec<ParamSpec>,
    bn: Vec<(String, usize)>,
}

impl SpecBuilder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![fan_in, fan_out],
            init: ParamInit::Kaiming { fan_in },
        });
        self.params.push(ParamSpec { name: format!("{name}.bias"), shape: vec![fan_out], init: ParamInit::Zeros });
    }

    fn group_linear(&mut self, name: &str, channels: usize, groups: usize) {
        let c = channels / groups;
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![groups, c, c],
            init: ParamInit::Kaiming { fan_in: c },
        });
        self.params.push(ParamSpec { name: format!("{name}.bias"), shape: vec![channels], init: ParamInit::Zeros });
    }

    fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![channels], init: ParamInit::Ones });
        self.params.push(ParamSpec { name: format!("{name}.beta"), shape: vec![channels], init: ParamInit::Zeros });
        self.bn.push((String::from(name), channels));
    }

    fn cn_block(&mut self, prefix: &str, c: usize) {
        for s in 1..=2 {
            self.linear(&format!("{prefix}.lin{s}"), c, c);
            self.batch_norm(&format!("{prefix}.bn{s}"), c);
        }
    }
}

impl DetarConfig {
    /// Every trainable tensor and batch-norm site implied by the config.
    pub fn param_specs(&self) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
        let c = self.channels;
        let mut b = SpecBuilder { params: Vec::new(), bn: Vec::new() };
        b.linear("embed", 3, c);
        for l in 0..self.k_cfd {
            b.cn_block(&format!("cfd.{l}.cn"), c);
            b.linear(&format!("cfd.{l}.gate"), c, 1);
            b.linear(&format!("drift.{l}"), c, 3);
        }
        if self.t_head == THead::Regress {
            b.linear("thead", self.k_cfd * c, 3);
        }
        if self.use_ceu {
            b.linear("ceu.coord", 3, c);
        } else {
            b.linear("ceu.raw", 6, c);
        }
        b.linear("cls.in", self.feature_width(), c);
        for m in 0..self.m_sca {
            let p = format!("cls.block.{m}");
            match self.blocks {
                BlockKind::Sca => {
                    b.linear(&format!("{p}.pre"), c, c);
                    b.linear(&format!("{p}.attn"), c, 1);
                    b.batch_norm(&format!("{p}.bn"), c);
                    b.group_linear(&format!("{p}.gate"), c, self.groups);
                }
                BlockKind::Cn => b.cn_block(&p, c),
            }
        }
        b.linear("cls.out", c, 1);
        if self.r_head == RHead::Regress {
            b.linear("rhead", c, 3);
        }
        (b.params, b.bn)
    }
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so the result does not depend on creation order.
    pub fn init(config: &DetarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, bn_sites) = config.param_specs();
        let mut tensors = BTreeMap::new();
        for s in specs {
            let t = match s.init {
                ParamInit::Zeros => Tensor::zeros(&s.shape),
                ParamInit::Ones => Tensor::full(&s.shape, T::one()),
                ParamInit::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut r = rng::keyed(seed, &s.name);
                    Tensor::from_fn(&s.shape, |_| T::of(r.random_range(-bound..bound)))
                }
            };
            tensors.insert(s.name, t);
        }
        let bn = bn_sites.into_iter().map(|(name, c)| (name, BnRunning::new(c))).collect();
        Ok(ModelParams { config: config.clone(), tensors, bn })
    }

    /// Checks names and shapes against what the config requires.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let (specs, bn_sites) = self.config.param_specs();
        if specs.len() != self.tensors.len() {
            bail!(Shape, "config needs {} tensors, found {}", specs.len(), self.tensors.len());
        }
        for s in &specs {
            let Some(t) = self.tensors.get(&s.name) else { bail!(MissingParameter, "{}", s.name) };
            if t.shape() != s.shape.as_slice() {
                bail!(Shape, "parameter `{}` has shape {:?}, config needs {:?}", s.name, t.shape(), s.shape);
            }
        }
        if bn_sites.len() != self.bn.len() {
            bail!(Shape, "config needs {} batch-norm sites, found {}", bn_sites.len(), self.bn.len());
        }
        for (name, c) in &bn_sites {
            let Some(r) = self.bn.get(name) else { bail!(MissingParameter, "{}", name) };
            if r.mean.len() != *c || r.var.len() != *c {
                bail!(Shape, "running statistics of `{}` do not have {} channels", name, c);
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Exponential moving average update from the statistics of one training pass.
    pub fn update_bn(&mut self, stats: &[BnBatchStats<T>], momentum: f64) -> Result<()> {
        let keep = T::of(momentum);
        let take = T::of(1.0 - momentum);
        for s in stats {
            let Some(r) = self.bn.get_mut(&s.name) else { bail!(MissingParameter, "{}", s.name) };
            for (rm, &m) in r.mean.iter_mut().zip(&s.mean) {
                *rm = keep * *rm + take * m;
            }
            for (rv, &v) in r.var.iter_mut().zip(&s.var) {
                *rv = keep * *rv + take * v;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, r)| {
                    let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect();
                    (k.clone(), BnRunning { mean: c(&r.mean), var: c(&r.var) })
                })
                .collect(),
        }
    }
}
