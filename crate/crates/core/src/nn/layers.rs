use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{BlockKind, BnRunning, DetarConfig, ModelParams};
use crate::error::{bail, Result};
use crate::tensor::{BnMode, Graph, Var};
use crate::Real;

/// Parameters bound into one graph, plus the batch-norm mode for this pass.
pub struct Net<'a, T> {
    pub config: &'a DetarConfig,
    vars: BTreeMap<String, Var>,
    bn: &'a BTreeMap<String, BnRunning<T>>,
    mode: BnMode,
}

impl<'a, T: Real> Net<'a, T> {
    /// Registers every parameter of `params` as a named leaf of `g`.
    pub fn bind(g: &mut Graph<T>, params: &'a ModelParams<T>, mode: BnMode) -> Self {
        let vars = params.tensors.iter().map(|(k, t)| (k.clone(), g.param(k, t.clone()))).collect();
        Net { config: &params.config, vars, bn: &params.bn, mode }
    }

    /// Uses caller-provided variables for the parameters.
    pub fn from_vars(
        config: &'a DetarConfig,
        vars: BTreeMap<String, Var>,
        bn: &'a BTreeMap<String, BnRunning<T>>,
        mode: BnMode,
    ) -> Self {
        Net { config, vars, bn, mode }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(MissingParameter, "{}", name),
        }
    }

    pub fn linear(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        g.linear(x, w, Some(b))
    }

    pub fn batch_norm(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        match self.mode {
            BnMode::Train => g.batch_norm(x, gamma, beta, BnMode::Train, &[], &[], name),
            BnMode::Eval => {
                let Some(r) = self.bn.get(name) else { bail!(MissingParameter, "running statistics `{}`", name) };
                g.batch_norm(x, gamma, beta, BnMode::Eval, &r.mean, &r.var, name)
            }
        }
    }
}

/// Residual `x + [linear → CN → BN → ReLU] × 2`.
pub fn cn_block<T: Real>(g: &mut Graph<T>, net: &Net<T>, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for s in 1..=2 {
        h = net.linear(g, &format!("{prefix}.lin{s}"), h)?;
        h = g.context_norm(h)?;
        h = net.batch_norm(g, &format!("{prefix}.bn{s}"), h)?;
        h = g.relu(h);
    }
    g.add(x, h)
}

/// Shared offset `δ = Σ w′ᵢ d′ᵢ / (Σ w′ᵢ + ε)` with `d′ = fy − fx` and
/// `w′ = sigmoid(linear(d′))`; returns `[B, 1, C]`.
pub fn global_interaction<T: Real>(g: &mut Graph<T>, net: &Net<T>, gate: &str, fx: Var, fy: Var) -> Result<Var> {
    let d = g.sub(fy, fx)?;
    let logit = net.linear(g, gate, d)?;
    let w = g.sigmoid(logit);
    g.weighted_mean_over_points(d, w)
}

/// Output of one drift layer.
#[derive(Debug, Clone, Copy)]
pub struct CfdOut {
    /// Source features before the drift.
    pub fx_pre: Var,
    pub fx: Var,
    pub fy: Var,
    pub delta: Var,
}

/// One drift layer: the shared CN block on both streams, then every source
/// feature moves by the same offset. Target features are left in place.
pub fn cfd_layer<T: Real>(g: &mut Graph<T>, net: &Net<T>, layer: usize, fx_prev: Var, fy_prev: Var) -> Result<CfdOut> {
    let b = g.shape(fx_prev)[0];
    let stacked = g.concat(&[fx_prev, fy_prev], 0)?;
    let f = cn_block(g, net, &format!("cfd.{layer}.cn"), stacked)?;
    let fx_pre = g.slice_axis0(f, 0, b)?;
    let fy = g.slice_axis0(f, b, b)?;
    let delta = global_interaction(g, net, &format!("cfd.{layer}.gate"), fx_pre, fy)?;
    let fx = g.add(fx_pre, delta)?;
    Ok(CfdOut { fx_pre, fx, fy, delta })
}

/// Per-layer translations `t_l = linear_l(δ_1 + … + δ_l)`, each `[B, 1, 3]`.
pub fn drift_heads<T: Real>(g: &mut Graph<T>, net: &Net<T>, deltas: &[Var]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(deltas.len());
    let mut acc: Option<Var> = None;
    for (l, &d) in deltas.iter().enumerate() {
        let s = match acc {
            None => d,
            Some(a) => g.add(a, d)?,
        };
        acc = Some(s);
        out.push(net.linear(g, &format!("drift.{l}"), s)?);
    }
    Ok(out)
}

/// `t = linear(concat(δ_1 … δ_K))`, `[B, 1, 3]`.
pub fn translation_head<T: Real>(g: &mut Graph<T>, net: &Net<T>, deltas: &[Var]) -> Result<Var> {
    let cat = g.concat(deltas, 2)?;
    net.linear(g, "thead", cat)
}

/// Per-correspondence features: an embedding of `yᵢ − t − xᵢ` next to the
/// element-wise maximum of the per-layer feature gaps `f_l(y) − f_l(x)`.
pub fn ceu_features<T: Real>(
    g: &mut Graph<T>,
    net: &Net<T>,
    x: Var,
    y: Var,
    t: Var,
    fx: &[Var],
    fy: &[Var],
) -> Result<Var> {
    if !net.config.use_ceu {
        let raw = g.concat(&[x, y], 2)?;
        return net.linear(g, "ceu.raw", raw);
    }
    let yt = g.sub(y, t)?;
    let offset = g.sub(yt, x)?;
    let coord = net.linear(g, "ceu.coord", offset)?;
    if fx.len() != fy.len() {
        bail!(Shape, "{} source layers vs {} target layers", fx.len(), fy.len());
    }
    let gaps = fx.iter().zip(fy).map(|(&a, &b)| g.sub(b, a)).collect::<Result<Vec<_>>>()?;
    let feat = g.max_over_layers(&gaps)?;
    g.concat(&[coord, feat], 2)
}

/// Residual `f + gate(s) ⊙ s` with `s = ReLU(BN(WCN(h, softmax(linear(h)))))`,
/// `h = linear(f)` and `gate = sigmoid(group_linear(·))` per correspondence.
pub fn sca_block<T: Real>(g: &mut Graph<T>, net: &Net<T>, prefix: &str, f: Var) -> Result<Var> {
    let h = net.linear(g, &format!("{prefix}.pre"), f)?;
    let a = net.linear(g, &format!("{prefix}.attn"), h)?;
    let w = g.softmax_over_points(a)?;
    let s = g.weighted_context_norm(h, w)?;
    let s = net.batch_norm(g, &format!("{prefix}.bn"), s)?;
    let s = g.relu(s);
    let gw = net.p(&format!("{prefix}.gate.weight"))?;
    let gb = net.p(&format!("{prefix}.gate.bias"))?;
    let gl = g.group_linear(s, gw, Some(gb), net.config.groups)?;
    let gate = g.sigmoid(gl);
    let attended = g.mul(s, gate)?;
    g.add(f, attended)
}

/// Logits `[B, N, 1]` and the final block features `[B, N, C]`.
pub fn classify<T: Real>(g: &mut Graph<T>, net: &Net<T>, features: Var) -> Result<(Var, Var)> {
    let mut h = net.linear(g, "cls.in", features)?;
    for m in 0..net.config.m_sca {
        let p = format!("cls.block.{m}");
        h = match net.config.blocks {
            BlockKind::Sca => sca_block(g, net, &p, h)?,
            BlockKind::Cn => cn_block(g, net, &p, h)?,
        };
    }
    let logits = net.linear(g, "cls.out", h)?;
    Ok((logits, h))
}
