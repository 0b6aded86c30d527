use alloc::vec;
use alloc::vec::Vec;

use super::layers::{cfd_layer, ceu_features, classify, drift_heads, translation_head, Net};
use super::{ModelParams, RHead, THead};
use crate::data::{Batch, CorrespondenceSet, DEFAULT_TAU_LABEL};
use crate::error::{bail, Result};
use crate::geom::{self, Mat3, RigidTransform, Vec3};
use crate::tensor::{BnMode, Graph, Tensor, Var};
use crate::Real;

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<T> {
    /// `[B, 1, 3]`; a constant when the translation comes from weighted Kabsch.
    pub t: Var,
    pub t_layers: Vec<Var>,
    pub deltas: Vec<Var>,
    pub fx_pre: Vec<Var>,
    pub fx: Vec<Var>,
    pub fy: Vec<Var>,
    pub logits: Var,
    /// `[B, 3, 3]`; a constant for the SVD head, differentiable for the regressed one.
    pub r: Var,
    pub weights: Tensor<T>,
    pub r_values: Vec<Mat3>,
    pub t_values: Vec<Vec3>,
    /// Instances whose weighted SVD was degenerate and fell back to the identity.
    pub degenerate: Vec<bool>,
}

/// Per-layer intermediate values of the drift stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PcfdTrace<T> {
    pub fx_pre: Vec<Tensor<T>>,
    pub fx: Vec<Tensor<T>>,
    pub fy: Vec<Tensor<T>>,
    pub deltas: Vec<Tensor<T>>,
    /// `t_layers[l][b]`.
    pub t_layers: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<T> {
    pub t_est: Vec<Vec3>,
    /// `[B, N, 1]`.
    pub logits: Tensor<T>,
    pub r_est: Vec<Mat3>,
    /// `tanh(relu(logits))`, `[B, N]`.
    pub weights: Tensor<T>,
    pub trace: PcfdTrace<T>,
    pub degenerate: Vec<bool>,
}

impl<T: Real> NetOutput<T> {
    pub fn transform(&self, b: usize) -> RigidTransform {
        RigidTransform { r: self.r_est[b], t: self.t_est[b] }
    }

    /// Sigmoid of the logits of instance `b`.
    pub fn probabilities(&self, b: usize) -> Vec<f64> {
        let n = self.weights.shape()[1];
        self.logits.data()[b * n..(b + 1) * n].iter().map(|l| 1.0 / (1.0 + (-l.f64()).exp())).collect()
    }
}

fn points<T: Real>(t: &Tensor<T>, b: usize) -> Vec<Vec3> {
    let n = t.shape()[1];
    t.data()[b * n * 3..(b + 1) * n * 3].chunks_exact(3).map(|p| [p[0].f64(), p[1].f64(), p[2].f64()]).collect()
}

fn vec3s<T: Real>(t: &Tensor<T>) -> Vec<Vec3> {
    t.data().chunks_exact(3).map(|p| [p[0].f64(), p[1].f64(), p[2].f64()]).collect()
}

fn mats<T: Real>(t: &Tensor<T>) -> Vec<Mat3> {
    t.data()
        .chunks_exact(9)
        .map(|m| core::array::from_fn(|i| core::array::from_fn(|j| m[i * 3 + j].f64())))
        .collect()
}

fn mats_tensor<T: Real>(m: &[Mat3]) -> Tensor<T> {
    let data = m.iter().flat_map(|r| r.iter().flatten().map(|&v| T::of(v)).collect::<Vec<_>>()).collect();
    Tensor::new(&[m.len(), 3, 3], data).expect("3×3 blocks")
}

/// Inlier weight `tanh(relu(l))`, kept below 1 where `tanh` rounds up to it.
fn logit_weight<T: Real>(l: T) -> T {
    l.max(T::zero()).tanh().min(T::one() - T::epsilon() / T::of(2.0))
}

/// Inlier weights `tanh(relu(L))`, in `[0, 1)`.
pub fn logit_weights(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| logit_weight(l)).collect()
}

/// Weighted Procrustes rotation between `x` and the translation-removed `y − t`.
pub fn svd_rotation(x: &[Vec3], y: &[Vec3], t: &Vec3, w: &[f64]) -> Result<Mat3> {
    let yp: Vec<Vec3> = y.iter().map(|p| geom::sub(p, t)).collect();
    geom::weighted_procrustes_rotation(x, &yp, w)
}

/// Runs the network on `[B, N, 3]` source and target tensors inside `g`.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, net: &Net<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<ForwardVars<T>> {
    let cfg = net.config;
    let (b, n, k) = x.dims3()?;
    if k != 3 || y.shape() != x.shape() {
        bail!(Shape, "forward expects matching [B, N, 3] inputs, got {:?} and {:?}", x.shape(), y.shape());
    }
    if n < 3 {
        bail!(InvalidArgument, "forward needs at least 3 correspondences, got {}", n);
    }
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let mut fx = net.linear(g, "embed", xv)?;
    let mut fy = net.linear(g, "embed", yv)?;

    let (mut fx_pre_l, mut fx_l, mut fy_l, mut deltas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in 0..cfg.k_cfd {
        let out = cfd_layer(g, net, l, fx, fy)?;
        fx = out.fx;
        fy = out.fy;
        fx_pre_l.push(out.fx_pre);
        fx_l.push(out.fx);
        fy_l.push(out.fy);
        deltas.push(out.delta);
    }
    let t_layers = drift_heads(g, net, &deltas)?;

    let t_reg = match cfg.t_head {
        THead::Regress => Some(translation_head(g, net, &deltas)?),
        THead::Svd => None,
    };
    // Only the translation losses train the translation head.
    let t_ceu = match t_reg {
        Some(t) => g.detach(t),
        None => g.constant(Tensor::zeros(&[b, 1, 3])),
    };
    let features = ceu_features(g, net, xv, yv, t_ceu, &fx_l, &fy_l)?;
    let (logits, h) = classify(g, net, features)?;
    let weights = g.value(logits).map(logit_weight).reshape(&[b, n])?;

    let mut degenerate = vec![false; b];
    let mut t_values: Vec<Vec3> = match t_reg {
        Some(t) => vec3s(g.value(t)),
        None => vec![[0.0; 3]; b],
    };
    let mut r_svd = vec![geom::IDENTITY; b];
    for bi in 0..b {
        let (xs, ys) = (points(x, bi), points(y, bi));
        let w: Vec<f64> = weights.data()[bi * n..(bi + 1) * n].iter().map(|v| v.f64()).collect();
        match (cfg.t_head, cfg.r_head) {
            (THead::Svd, _) => match geom::weighted_kabsch_full(&xs, &ys, &w) {
                Ok(tr) => {
                    r_svd[bi] = tr.r;
                    t_values[bi] = tr.t;
                }
                Err(_) => degenerate[bi] = true,
            },
            (THead::Regress, RHead::Svd) => match svd_rotation(&xs, &ys, &t_values[bi], &w) {
                Ok(r) => r_svd[bi] = r,
                Err(_) => degenerate[bi] = true,
            },
            (THead::Regress, RHead::Regress) => {}
        }
    }
    let t = match t_reg {
        Some(t) => t,
        None => {
            let data = t_values.iter().flatten().map(|&v| T::of(v)).collect();
            g.constant(Tensor::new(&[b, 1, 3], data)?)
        }
    };
    let r = match cfg.r_head {
        RHead::Svd => g.constant(mats_tensor(&r_svd)),
        RHead::Regress => {
            let pooled = g.mean_over_points(h)?;
            let v = net.linear(g, "rhead", pooled)?;
            g.rodrigues(v)?
        }
    };
    let r_values = mats(g.value(r));
    Ok(ForwardVars {
        t,
        t_layers,
        deltas,
        fx_pre: fx_pre_l,
        fx: fx_l,
        fy: fy_l,
        logits,
        r,
        weights,
        r_values,
        t_values,
        degenerate,
    })
}

/// Forward pass outside of training; nothing is recorded for differentiation.
pub fn forward<T: Real>(params: &ModelParams<T>, batch: &Batch<T>, mode: BnMode) -> Result<NetOutput<T>> {
    let mut g = Graph::inference();
    let net = Net::bind(&mut g, params, mode);
    let v = forward_graph(&mut g, &net, &batch.x, &batch.y)?;
    let grab = |vs: &[Var]| vs.iter().map(|&u| g.value(u).clone()).collect::<Vec<_>>();
    let trace = PcfdTrace {
        fx_pre: grab(&v.fx_pre),
        fx: grab(&v.fx),
        fy: grab(&v.fy),
        deltas: grab(&v.deltas),
        t_layers: v.t_layers.iter().map(|&u| vec3s(g.value(u))).collect(),
    };
    Ok(NetOutput {
        t_est: v.t_values,
        logits: g.value(v.logits).clone(),
        r_est: v.r_values,
        weights: v.weights,
        trace,
        degenerate: v.degenerate,
    })
}

/// Registers a single correspondence set with running batch-norm statistics.
pub fn infer<T: Real>(params: &ModelParams<T>, set: &CorrespondenceSet) -> Result<NetOutput<T>> {
    let batch = Batch::from_sets(&[set], DEFAULT_TAU_LABEL)?;
    forward(params, &batch, BnMode::Eval)
}
