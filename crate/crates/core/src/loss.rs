//! Training objective: translation, classification, alignment and drift terms.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{bail, Result};
use crate::nn::ForwardVars;
use crate::tensor::{Graph, Tensor, Var};
use crate::Real;

/// Coefficients of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub trans: f64,
    pub cls: f64,
    pub align: f64,
    pub drift: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { trans: 2.0, cls: 1.0, align: 1.0, drift: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail!(Config, "loss weights must be finite and non-negative: {:?}", self);
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.trans, self.cls, self.align, self.drift]
    }

    /// Weighted sum of already evaluated terms.
    pub fn combine(&self, parts: [f64; 4]) -> f64 {
        self.as_array().iter().zip(parts).map(|(w, p)| w * p).sum()
    }
}

/// Mean over the batch of `‖t − t_gt‖`; `t` is `[B, 1, 3]`, `t_gt` holds `B × 3` values.
pub fn trans_loss<T: Real>(g: &mut Graph<T>, t: Var, t_gt: &Tensor<T>) -> Result<Var> {
    let b = g.shape(t)[0];
    let target = t_gt.clone().reshape(&[b, 1, 3])?;
    g.masked_distance(t, &target, &Tensor::full(&[b, 1], T::one()))
}

/// Per-entry weights that give inliers and outliers of each instance equal
/// total mass. Instances with only one class keep unit weights.
pub fn class_balance<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, n] = mask.shape() else { bail!(Shape, "mask must be [B, N], got {:?}", mask.shape()) };
    let (b, n) = (*b, *n);
    let mut w = Vec::with_capacity(b * n);
    for row in mask.data().chunks_exact(n.max(1)).take(b) {
        let pos = row.iter().filter(|&&m| m > T::zero()).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            w.extend(core::iter::repeat_n(T::one(), n));
        } else {
            let (wp, wn) = (n as f64 / (2.0 * pos as f64), n as f64 / (2.0 * neg as f64));
            w.extend(row.iter().map(|&m| T::of(if m > T::zero() { wp } else { wn })));
        }
    }
    Tensor::new(&[b, n], w)
}

/// Class-balanced binary cross-entropy of `[B, N, 1]` logits against a `[B, N]` mask.
pub fn cls_loss<T: Real>(g: &mut Graph<T>, logits: Var, mask: &Tensor<T>) -> Result<Var> {
    let weights = class_balance(mask)?;
    g.bce_with_logits(logits, mask, &weights)
}

/// `(1/B) Σ_b (1/N) Σᵢ mᵢ ‖yᵢ − (R·xᵢ + t)‖`.
pub fn align_loss<T: Real>(
    g: &mut Graph<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mask: &Tensor<T>,
    r: Var,
    t: Var,
) -> Result<Var> {
    let pred = g.transform_points(r, t, x)?;
    g.masked_distance(pred, y, mask)
}

/// Alignment with the true rotation and each layer's translation, averaged over layers.
pub fn drift_loss<T: Real>(
    g: &mut Graph<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mask: &Tensor<T>,
    r_gt: &Tensor<T>,
    t_layers: &[Var],
) -> Result<Var> {
    if t_layers.is_empty() {
        bail!(Empty, "drift loss needs at least one layer");
    }
    let r = g.constant(r_gt.clone());
    let mut total: Option<Var> = None;
    for &t in t_layers {
        let l = align_loss(g, x, y, mask, r, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / t_layers.len() as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub trans: Var,
    pub cls: Var,
    pub align: Var,
    pub drift: Var,
}

impl LossParts {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> [f64; 4] {
        [self.trans, self.cls, self.align, self.drift].map(|v| g.value(v).item().f64())
    }
}

/// `λ₁·trans + λ₂·cls + λ₃·align + λ₄·drift`; terms with a zero weight are left out.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (v, w) in [parts.trans, parts.cls, parts.align, parts.drift].into_iter().zip(weights.as_array()) {
        if w != 0.0 {
            let s = g.scale(v, w);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// All four terms for a forward pass over `batch`.
pub fn model_losses<T: Real>(g: &mut Graph<T>, fv: &ForwardVars<T>, batch: &Batch<T>) -> Result<LossParts> {
    let (Some(mask), Some(r_gt), Some(t_gt)) = (&batch.mask, &batch.r_gt, &batch.t_gt) else {
        bail!(InvalidArgument, "training needs ground truth for every set in the batch");
    };
    Ok(LossParts {
        trans: trans_loss(g, fv.t, t_gt)?,
        cls: cls_loss(g, fv.logits, mask)?,
        align: align_loss(g, &batch.x, &batch.y, mask, fv.r, fv.t)?,
        drift: drift_loss(g, &batch.x, &batch.y, mask, r_gt, &fv.t_layers)?,
    })
}
