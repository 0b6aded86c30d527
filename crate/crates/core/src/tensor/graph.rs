use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::Tensor;
use crate::error::{bail, Result};
use crate::real::Real;

/// Handle to a value in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Entry<T: Real> {
    pub(crate) value: Tensor<T>,
    /// Present only when the graph records and the value depends on a leaf.
    pub(crate) node: Option<Op<T>>,
    pub(crate) param: Option<String>,
}

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Real> {
    record: bool,
    pub(crate) entries: Vec<Entry<T>>,
    pub(crate) bn_stats: Vec<BnBatchStats<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records ops for a later [`Graph::backward`].
    pub fn new() -> Self {
        Graph { record: true, entries: Vec::new(), bn_stats: Vec::new() }
    }

    /// A graph that only evaluates; it never allocates a node.
    pub fn inference() -> Self {
        Graph { record: false, entries: Vec::new(), bn_stats: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Number of recorded nodes (leaves included).
    pub fn node_count(&self) -> usize {
        self.entries.iter().filter(|e| e.node.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].node.is_some()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.entries.push(Entry { value, node: None, param: None });
        Var(self.entries.len() - 1)
    }

    /// A differentiable leaf (when recording).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let node = self.record.then_some(Op::Leaf);
        self.entries.push(Entry { value, node, param: None });
        Var(self.entries.len() - 1)
    }

    /// A named trainable parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.entries[v.0].param = Some(name.to_string());
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.entries[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let node = (self.record && inputs.iter().any(|v| self.entries[v.0].node.is_some())).then(op);
        self.entries.push(Entry { value, node, param: None });
        Var(self.entries.len() - 1)
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnBatchStats<T>> {
        core::mem::take(&mut self.bn_stats)
    }

    /// Reverse sweep from a scalar. Each recorded node is visited once, in reverse
    /// creation order, which is a valid reverse topological order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            bail!(InvalidArgument, "backward on an inference graph");
        }
        if self.value(loss).numel() != 1 {
            bail!(Shape, "backward needs a scalar, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.entries.len()];
        if self.entries[loss.0].node.is_none() {
            return Ok(Gradients { grads, names: self.param_names() });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.entries[i].node else { continue };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            op.backward(self, Var(i), &g, &mut grads);
        }
        // Only leaves keep their buffers.
        for (i, e) in self.entries.iter().enumerate() {
            if !matches!(e.node, Some(Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, names: self.param_names() })
    }

    fn param_names(&self) -> Vec<(usize, String)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.param.as_ref().map(|n| (i, n.clone())))
            .collect()
    }

    /// Gradient buffer for `v`, created zeroed on first use; `None` when `v` does
    /// not need a gradient.
    pub(crate) fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        self.entries[v.0].node.as_ref()?;
        let len = self.entries[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Leaf gradients from one backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    names: Vec<(usize, String)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros if the leaf did not influence the loss.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Option<Tensor<T>> {
        if !matches!(graph.entries[v.0].node, Some(Op::Leaf)) {
            return None;
        }
        let shape = graph.shape(v);
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients of every named parameter, zero-filled where unused.
    /// A parameter registered more than once has its gradients summed.
    pub fn params(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, name) in &self.names {
            let shape = graph.entries[*i].value.shape();
            let slot = out.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            if let Some(g) = &self.grads[*i] {
                slot.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
        out
    }
}
