//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            bail!(Config, "invalid Adam hyper-parameters: lr {}, betas ({}, {}), eps {}", self.lr, self.beta1, self.beta2, self.eps);
        }
        for (name, m) in &self.m {
            if self.v.get(name).map(|v| v.shape()) != Some(m.shape()) {
                bail!(Shape, "moment buffers of `{}` disagree", name);
            }
        }
        Ok(())
    }
}

/// One Adam step over every parameter that has a gradient. Nothing is updated
/// if any gradient is non-finite or mis-shaped.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get(name) else { bail!(MissingParameter, "gradient for unknown parameter `{}`", name) };
        if p.shape() != g.shape() {
            bail!(Shape, "gradient of `{}` is {:?}, parameter is {:?}", name, g.shape(), p.shape());
        }
        if let Some(m) = state.m.get(name) {
            if m.shape() != p.shape() {
                bail!(Shape, "moment buffer of `{}` is {:?}, parameter is {:?}", name, m.shape(), p.shape());
            }
        }
        if !g.all_finite() {
            bail!(NonFiniteGradient, "{}", name);
        }
    }

    state.step += 1;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - state.beta1.powi(step);
    let c2 = 1.0 - state.beta2.powi(step);
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (a1, a2) = (T::one() - b1, T::one() - b2);
    let (lr, eps) = (T::of(state.lr / c1), T::of(state.eps));
    let inv_c2 = T::of(1.0 / c2);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + a1 * gi;
            *vi = b2 * *vi + a2 * gi * gi;
            *pi -= lr * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
        debug_assert!(p.all_finite(), "parameter `{name}` became non-finite");
    }
    Ok(())
}
