//! Central finite-difference gradient checking in f64.
//!
//! The checker only evaluates forward passes for the numeric side, so it stays
//! independent of every backward rule it checks.

use alloc::vec::Vec;

use rand::Rng as _;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks `d/d inputs` of `Σ r ⊙ f(inputs)` for a fixed random projection `r`
/// (or of `f` itself when it returns a scalar).
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with_step(inputs, seed, DEFAULT_STEP, f)
}

pub fn check_with_step<F>(inputs: &[Tensor<f64>], seed: u64, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut rng = crate::rng::keyed(seed, "gradcheck-projection");

    let mut scalar_of = |graph: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = f(graph, vars)?;
        if graph.value(out).numel() == 1 {
            return Ok(out);
        }
        let shape = graph.shape(out).to_vec();
        let r = projection
            .get_or_insert_with(|| Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))
            .clone();
        let rv = graph.constant(r);
        let prod = graph.mul(out, rv)?;
        Ok(graph.sum_all(prod))
    };

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = scalar_of(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(&graph, v).expect("leaf")).collect();
    drop(graph);

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut eval_at = |value: f64| -> Result<f64> {
                work[i].data_mut()[j] = value;
                let mut g = Graph::inference();
                let vs: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
                let l = scalar_of(&mut g, &vs)?;
                Ok(g.value(l).item())
            };
            let plus = eval_at(orig + step)?;
            let minus = eval_at(orig - step)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    Ok(GradCheckReport { rel_error: diff2.sqrt() / denom, max_abs_error: max_abs, grad_norm: a2.sqrt() })
}
