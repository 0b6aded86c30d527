use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::data::{generate, Batch, GenSpec, DEFAULT_TAU_LABEL};
use crate::geom;
use crate::tensor::gradcheck::check;
use crate::tensor::{BnMode, Graph, Tensor, Var};

const POINTS: u64 = 10;

fn tiny() -> DetarConfig {
    DetarConfig { k_cfd: 2, m_sca: 1, channels: 8, groups: 2, n_corr: 6, ..DetarConfig::default() }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = crate::rng::keyed(seed, "nn-tests");
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Parameters with every tensor randomised, so no block starts at a trivial point.
fn random_params(cfg: &DetarConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    for (name, t) in p.tensors.iter_mut() {
        let (lo, hi) = if name.ends_with(".gamma") { (0.5, 1.5) } else { (-0.8, 0.8) };
        *t = rand_tensor(t.shape(), crate::rng::derive_seed(seed, name), lo, hi);
    }
    for (i, r) in p.bn.values_mut().enumerate() {
        r.mean = rand_tensor(&[r.mean.len()], seed + 1000 + i as u64, -0.3, 0.3).into_data();
        r.var = rand_tensor(&[r.var.len()], seed + 2000 + i as u64, 0.5, 2.0).into_data();
    }
    p
}

/// Gradient check of `f` with respect to `extra` inputs and every parameter
/// whose name starts with one of `prefixes`.
fn block_rel_error<F>(cfg: &DetarConfig, seed: u64, prefixes: &[&str], extra: Vec<Tensor<f64>>, mode: BnMode, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &Net<f64>, &[Var]) -> crate::Result<Var>,
{
    let params = random_params(cfg, seed);
    let names: Vec<String> =
        params.tensors.keys().filter(|k| prefixes.iter().any(|p| k.starts_with(p))).cloned().collect();
    assert!(!names.is_empty() || prefixes.is_empty());
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| params.tensors[n].clone()));
    let rep = check(&inputs, seed, |g, vs| {
        let vars: BTreeMap<String, Var> = names.iter().cloned().zip(vs[n_extra..].iter().copied()).collect();
        let net = Net::from_vars(&params.config, vars, &params.bn, mode);
        f(g, &net, &vs[..n_extra])
    })
    .unwrap();
    rep.rel_error
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (b, n, c) = t.dims3().unwrap();
    Tensor::from_fn(&[b, n, c], |idx| {
        let (bi, rest) = (idx / (n * c), idx % (n * c));
        let (i, j) = (rest / c, rest % c);
        t.data()[(bi * n + perm[i]) * c + j]
    })
}

fn random_perm(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut crate::rng::keyed(seed, "perm"));
    p
}

fn bind_f32(g: &mut Graph<f32>, p: &ModelParams<f32>, mode: BnMode) -> BTreeMap<String, Var> {
    Net::bind(g, p, mode).vars().clone()
}

#[test]
fn config_validation() {
    assert!(DetarConfig::default().validate().is_ok());
    assert!(DetarConfig::desk().validate().is_ok());
    assert!(DetarConfig { k_cfd: 0, ..tiny() }.validate().is_err());
    assert!(DetarConfig { channels: 10, groups: 4, ..tiny() }.validate().is_err());
    assert!(DetarConfig { n_corr: 2, ..tiny() }.validate().is_err());
    assert!(ModelParams::<f32>::init(&DetarConfig { groups: 3, ..tiny() }, 0).is_err());
}

#[test]
fn init_is_keyed_by_name() {
    let a = ModelParams::<f32>::init(&tiny(), 5).unwrap();
    let b = ModelParams::<f32>::init(&DetarConfig { k_cfd: 3, ..tiny() }, 5).unwrap();
    assert_eq!(a, ModelParams::<f32>::init(&tiny(), 5).unwrap());
    assert_eq!(a.tensors["cfd.1.cn.lin2.weight"], b.tensors["cfd.1.cn.lin2.weight"]);
    assert_ne!(a.tensors["cfd.0.cn.lin1.weight"], a.tensors["cfd.1.cn.lin1.weight"]);
    let w = &a.tensors["cls.in.weight"];
    let bound = (6.0f64 / 16.0).sqrt() as f32;
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.tensors["cls.in.bias"].data().iter().all(|&v| v == 0.0));
    assert!(a.tensors["cfd.0.cn.bn1.gamma"].data().iter().all(|&v| v == 1.0));
    a.check().unwrap();

    let mut bad = a.clone();
    bad.tensors.insert("embed.weight".into(), Tensor::zeros(&[3, 9]));
    assert!(bad.check().is_err());
    let mut missing = a.clone();
    missing.tensors.remove("cls.out.bias");
    assert!(missing.check().is_err());
}

#[test]
fn siamese_layers_own_one_parameter_set() {
    let (specs, bn) = tiny().param_specs();
    for l in 0..2 {
        let prefix = alloc::format!("cfd.{l}.cn.");
        let count = specs.iter().filter(|s| s.name.starts_with(&prefix)).count();
        // lin1, lin2 (weight + bias) and bn1, bn2 (gamma + beta): one block, not two.
        assert_eq!(count, 8);
        assert_eq!(bn.iter().filter(|(n, _)| n.starts_with(&prefix)).count(), 2);
    }
}

#[test]
fn cn_block_zero_parameters_is_identity() {
    let cfg = tiny();
    let mut p = ModelParams::<f32>::init(&cfg, 0).unwrap();
    for (k, t) in p.tensors.iter_mut() {
        if k.starts_with("cfd.0.cn.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = rand_tensor(&[2, 6, 8], 1, -1.0, 1.0).cast::<f32>();
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut g = Graph::inference();
        let net = Net::bind(&mut g, &p, mode);
        let xv = g.constant(x.clone());
        let y = cn_block(&mut g, &net, "cfd.0.cn", xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn cn_block_is_permutation_equivariant() {
    let p = ModelParams::<f32>::init(&tiny(), 3).unwrap();
    let x = rand_tensor(&[2, 6, 8], 2, -1.0, 1.0).cast::<f32>();
    for (k, mode) in [BnMode::Train, BnMode::Eval].into_iter().enumerate() {
        let perm = random_perm(6, k as u64);
        let run = |input: &Tensor<f32>| {
            let mut g = Graph::inference();
            let net = Net::bind(&mut g, &p, mode);
            let xv = g.constant(input.clone());
            let y = cn_block(&mut g, &net, "cfd.0.cn", xv).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&permute_rows(&x, &perm)), permute_rows(&run(&x), &perm));
    }
}

#[test]
fn cn_block_gradients() {
    for k in 0..POINTS {
        let x = rand_tensor(&[4, 6, 8], 10 + k, -1.0, 1.0);
        for mode in [BnMode::Train, BnMode::Eval] {
            let e = block_rel_error(&tiny(), k, &["cfd.0.cn."], vec![x.clone()], mode, |g, net, v| {
                cn_block(g, net, "cfd.0.cn", v[0])
            });
            assert!(e < 1e-5, "cn_block rel error {e}");
        }
    }
}

#[test]
fn global_interaction_constant_offsets() {
    let p = random_params(&tiny(), 4);
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let fx = rand_tensor(&[2, 6, 8], 5, -1.0, 1.0);
    let fxv = g.constant(fx.clone());
    let d = global_interaction(&mut g, &net, "cfd.0.gate", fxv, fxv).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));

    let c = rand_tensor(&[1, 1, 8], 6, -2.0, 2.0);
    let fy = Tensor::from_fn(&[2, 6, 8], |i| fx.data()[i] + c.data()[i % 8]);
    let fyv = g.constant(fy.clone());
    let d = global_interaction(&mut g, &net, "cfd.0.gate", fxv, fyv).unwrap();
    // Exact up to the ε floor of the normalised mean.
    for (i, v) in g.value(d).data().iter().enumerate() {
        let ci = c.data()[i % 8];
        assert!((v - ci).abs() <= 2e-5 * ci.abs() + 1e-12, "{v} vs {ci}");
    }
}

#[test]
fn global_interaction_ignores_gated_out_points() {
    // Half the points carry offset c, the rest none; the gate opens only on c.
    let cfg = tiny();
    let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let c: Vec<f64> = (0..8).map(|j| 0.25 * (j as f64 + 1.0)).collect();
    let cc: f64 = c.iter().map(|v| v * v).sum();
    p.tensors.insert("cfd.0.gate.weight".into(), Tensor::new(&[8, 1], c.iter().map(|v| 100.0 * v / cc).collect()).unwrap());
    p.tensors.insert("cfd.0.gate.bias".into(), Tensor::full(&[1], -50.0));
    let fx = rand_tensor(&[1, 6, 8], 7, -1.0, 1.0);
    let fy = Tensor::from_fn(&[1, 6, 8], |i| fx.data()[i] + if (i / 8) % 2 == 0 { c[i % 8] } else { 0.0 });
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let (a, b) = (g.constant(fx), g.constant(fy));
    let d = global_interaction(&mut g, &net, "cfd.0.gate", a, b).unwrap();
    for (j, v) in g.value(d).data().iter().enumerate() {
        assert!((v - c[j]).abs() < 1e-5, "{v} vs {}", c[j]);
    }
}

#[test]
fn global_interaction_gradients() {
    for k in 0..POINTS {
        let fx = rand_tensor(&[2, 6, 8], 20 + k, -1.0, 1.0);
        let fy = rand_tensor(&[2, 6, 8], 30 + k, -1.0, 1.0);
        let e = block_rel_error(&tiny(), k, &["cfd.0.gate."], vec![fx, fy], BnMode::Train, |g, net, v| {
            global_interaction(g, net, "cfd.0.gate", v[0], v[1])
        });
        assert!(e < 1e-5, "global interaction rel error {e}");
    }
}

#[test]
fn cfd_layer_identical_streams_do_not_drift() {
    let p = ModelParams::<f32>::init(&tiny(), 8).unwrap();
    let f = rand_tensor(&[2, 6, 8], 9, -1.0, 1.0).cast::<f32>();
    let mut g = Graph::inference();
    let net = Net::bind(&mut g, &p, BnMode::Train);
    let (a, b) = (g.constant(f.clone()), g.constant(f));
    let out = cfd_layer(&mut g, &net, 0, a, b).unwrap();
    assert!(g.value(out.delta).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out.fx), g.value(out.fy));
}

#[test]
fn cfd_layer_streams_are_interchangeable() {
    let p = ModelParams::<f32>::init(&tiny(), 8).unwrap();
    let a = rand_tensor(&[2, 6, 8], 10, -1.0, 1.0).cast::<f32>();
    let b = rand_tensor(&[2, 6, 8], 11, -1.0, 1.0).cast::<f32>();
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut g = Graph::inference();
        let net = Net::bind(&mut g, &p, mode);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let o1 = cfd_layer(&mut g, &net, 0, av, bv).unwrap();
        let o2 = cfd_layer(&mut g, &net, 0, bv, av).unwrap();
        assert_eq!(g.value(o1.fx_pre), g.value(o2.fy));
        assert_eq!(g.value(o1.fy), g.value(o2.fx_pre));
    }
}

#[test]
fn cfd_layer_gradients() {
    for k in 0..POINTS {
        let fx = rand_tensor(&[2, 6, 8], 40 + k, -1.0, 1.0);
        let fy = rand_tensor(&[2, 6, 8], 50 + k, -1.0, 1.0);
        let e = block_rel_error(&tiny(), k, &["cfd.0."], vec![fx, fy], BnMode::Train, |g, net, v| {
            let o = cfd_layer(g, net, 0, v[0], v[1])?;
            let both = g.concat(&[o.fx, o.fy], 2)?;
            let d = g.reshape(o.delta, &[2, 1, 8])?;
            let s = g.mul(both, both)?;
            let t = g.sum_all(s);
            let u = g.sum_all(d);
            g.add(t, u)
        });
        assert!(e < 1e-5, "cfd layer rel error {e}");
    }
}

#[test]
fn drift_and_translation_heads_are_affine_maps() {
    let cfg = tiny();
    let p = random_params(&cfg, 12);
    let d1 = rand_tensor(&[2, 1, 8], 13, -1.0, 1.0);
    let d2 = rand_tensor(&[2, 1, 8], 14, -1.0, 1.0);
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let (a, b) = (g.constant(d1.clone()), g.constant(d2.clone()));
    let ts = drift_heads(&mut g, &net, &[a, b]).unwrap();
    let t = translation_head(&mut g, &net, &[a, b]).unwrap();
    let affine = |w: &Tensor<f64>, bias: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
        (0..3).map(|o| bias.data()[o] + v.iter().enumerate().map(|(i, x)| x * w.data()[i * 3 + o]).sum::<f64>()).collect()
    };
    for bi in 0..2 {
        let s1: Vec<f64> = d1.data()[bi * 8..bi * 8 + 8].to_vec();
        let s2: Vec<f64> = s1.iter().zip(&d2.data()[bi * 8..bi * 8 + 8]).map(|(a, b)| a + b).collect();
        let cat: Vec<f64> = s1.iter().chain(&d2.data()[bi * 8..bi * 8 + 8]).copied().collect();
        let cases = [
            (ts[0], affine(&p.tensors["drift.0.weight"], &p.tensors["drift.0.bias"], &s1)),
            (ts[1], affine(&p.tensors["drift.1.weight"], &p.tensors["drift.1.bias"], &s2)),
            (t, affine(&p.tensors["thead.weight"], &p.tensors["thead.bias"], &cat)),
        ];
        for (var, expect) in cases {
            for o in 0..3 {
                assert!((g.value(var).data()[bi * 3 + o] - expect[o]).abs() < 1e-12);
            }
        }
    }

    let z = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &z, BnMode::Eval);
    let zero = g.constant(Tensor::zeros(&[2, 1, 8]));
    let ts = drift_heads(&mut g, &net, &[zero, zero]).unwrap();
    let t = translation_head(&mut g, &net, &[zero, zero]).unwrap();
    for v in ts.into_iter().chain([t]) {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn head_gradients() {
    for k in 0..POINTS {
        let d1 = rand_tensor(&[2, 1, 8], 60 + k, -1.0, 1.0);
        let d2 = rand_tensor(&[2, 1, 8], 70 + k, -1.0, 1.0);
        let e = block_rel_error(&tiny(), k, &["drift."], vec![d1.clone(), d2.clone()], BnMode::Train, |g, net, v| {
            let ts = drift_heads(g, net, v)?;
            g.concat(&ts, 2)
        });
        assert!(e < 1e-5, "drift heads rel error {e}");
        let e = block_rel_error(&tiny(), k, &["thead."], vec![d1, d2], BnMode::Train, |g, net, v| {
            translation_head(g, net, v)
        });
        assert!(e < 1e-5, "translation head rel error {e}");
    }
}

#[test]
fn ceu_coordinate_branch_vanishes_under_exact_translation() {
    let cfg = DetarConfig { k_cfd: 1, ..tiny() };
    let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
    // Identity embedding of the offset into the first three channels.
    p.tensors.insert("ceu.coord.weight".into(), Tensor::from_fn(&[3, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }));
    let x = Tensor::from_fn(&[1, 6, 3], |i| ((i * 5) % 8) as f64 / 8.0 - 0.5);
    let t = [0.25, -0.5, 0.75];
    let y = Tensor::from_fn(&[1, 6, 3], |i| x.data()[i] + t[i % 3]);
    let fx = rand_tensor(&[1, 6, 8], 15, -1.0, 1.0);
    let fy = rand_tensor(&[1, 6, 8], 16, -1.0, 1.0);
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let (xv, yv) = (g.constant(x), g.constant(y));
    let tv = g.constant(Tensor::new(&[1, 1, 3], t.to_vec()).unwrap());
    let (fxv, fyv) = (g.constant(fx.clone()), g.constant(fy.clone()));
    let out = ceu_features(&mut g, &net, xv, yv, tv, &[fxv], &[fyv]).unwrap();
    let v = g.value(out);
    assert_eq!(v.shape(), &[1, 6, 16]);
    for i in 0..6 {
        let row = &v.data()[i * 16..(i + 1) * 16];
        assert!(row[..8].iter().all(|&e| e == 0.0));
        // K = 1: the pooled branch is the single layer gap.
        for j in 0..8 {
            assert_eq!(row[8 + j], fy.data()[i * 8 + j] - fx.data()[i * 8 + j]);
        }
    }
}

#[test]
fn ceu_gradients_route_through_the_max() {
    for k in 0..POINTS {
        let x = rand_tensor(&[2, 6, 3], 80 + k, -0.5, 0.5);
        let y = rand_tensor(&[2, 6, 3], 90 + k, -0.5, 0.5);
        let t = rand_tensor(&[2, 1, 3], 100 + k, -0.5, 0.5);
        let layers: Vec<Tensor<f64>> = (0..4).map(|l| rand_tensor(&[2, 6, 8], 110 + 10 * k + l, -1.0, 1.0)).collect();
        let mut inputs = vec![x, y, t];
        inputs.extend(layers);
        let e = block_rel_error(&tiny(), k, &["ceu."], inputs, BnMode::Train, |g, net, v| {
            ceu_features(g, net, v[0], v[1], v[2], &v[3..5], &v[5..7])
        });
        assert!(e < 1e-5, "ceu rel error {e}");
    }
}

#[test]
fn sca_block_is_permutation_equivariant() {
    let p = ModelParams::<f32>::init(&tiny(), 17).unwrap();
    let f = rand_tensor(&[2, 6, 8], 18, -1.0, 1.0).cast::<f32>();
    for (k, mode) in [BnMode::Train, BnMode::Eval].into_iter().enumerate() {
        let perm = random_perm(6, 100 + k as u64);
        let run = |input: &Tensor<f32>| {
            let mut g = Graph::inference();
            let net = Net::bind(&mut g, &p, mode);
            let v = g.constant(input.clone());
            let y = sca_block(&mut g, &net, "cls.block.0", v).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&permute_rows(&f, &perm)), permute_rows(&run(&f), &perm));
    }
}

#[test]
fn saturated_channel_gate_passes_features_through() {
    let mut p = random_params(&tiny(), 19);
    p.tensors.insert("cls.block.0.gate.weight".into(), Tensor::zeros(&[2, 4, 4]));
    p.tensors.insert("cls.block.0.gate.bias".into(), Tensor::full(&[8], 30.0));
    let f = rand_tensor(&[2, 6, 8], 20, -1.0, 1.0);
    let mut g = Graph::<f64>::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let fv = g.constant(f);
    let out = sca_block(&mut g, &net, "cls.block.0", fv).unwrap();
    // Same block with the channel attention removed.
    let h = net.linear(&mut g, "cls.block.0.pre", fv).unwrap();
    let a = net.linear(&mut g, "cls.block.0.attn", h).unwrap();
    let w = g.softmax_over_points(a).unwrap();
    let s = g.weighted_context_norm(h, w).unwrap();
    let s = net.batch_norm(&mut g, "cls.block.0.bn", s).unwrap();
    let s = g.relu(s);
    let reference = g.add(fv, s).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(reference)) < 1e-4);
}

#[test]
fn sca_block_gradients() {
    for k in 0..POINTS {
        let f = rand_tensor(&[2, 6, 8], 130 + k, -1.0, 1.0);
        for mode in [BnMode::Train, BnMode::Eval] {
            let e = block_rel_error(&tiny(), k, &["cls.block.0."], vec![f.clone()], mode, |g, net, v| {
                sca_block(g, net, "cls.block.0", v[0])
            });
            assert!(e < 1e-5, "sca block rel error {e}");
        }
    }
}

#[test]
fn classify_shapes_equivariance_and_gradients() {
    let p = ModelParams::<f32>::init(&tiny(), 21).unwrap();
    for (b, n) in [(1, 3), (2, 6), (3, 17)] {
        let feats = rand_tensor(&[b, n, 16], 22, -1.0, 1.0).cast::<f32>();
        let perm = random_perm(n, 23);
        let run = |input: &Tensor<f32>| {
            let mut g = Graph::inference();
            let net = Net::bind(&mut g, &p, BnMode::Eval);
            let v = g.constant(input.clone());
            let (l, _) = classify(&mut g, &net, v).unwrap();
            g.value(l).clone()
        };
        let logits = run(&feats);
        assert_eq!(logits.shape(), &[b, n, 1]);
        assert_eq!(run(&permute_rows(&feats, &perm)), permute_rows(&logits, &perm));
    }
    for k in 0..POINTS {
        let feats = rand_tensor(&[2, 6, 16], 140 + k, -1.0, 1.0);
        let e = block_rel_error(&tiny(), k, &["cls."], vec![feats], BnMode::Train, |g, net, v| {
            Ok(classify(g, net, v[0])?.0)
        });
        assert!(e < 1e-3, "classifier rel error {e}");
    }
}

#[test]
fn cn_classifier_blocks() {
    let cfg = DetarConfig { blocks: BlockKind::Cn, ..tiny() };
    let p = ModelParams::<f32>::init(&cfg, 24).unwrap();
    assert!(p.tensors.contains_key("cls.block.0.lin1.weight"));
    assert!(!p.tensors.contains_key("cls.block.0.attn.weight"));
    let mut g = Graph::inference();
    let net = Net::bind(&mut g, &p, BnMode::Eval);
    let v = g.constant(Tensor::full(&[1, 6, 16], 0.5f32));
    let (logits, _) = classify(&mut g, &net, v).unwrap();
    assert_eq!(g.shape(logits), &[1, 6, 1]);
}

fn desk_sets(count: usize, n: usize, seed: u64) -> Vec<crate::data::CorrespondenceSet> {
    (0..count)
        .map(|i| generate(&GenSpec { n_corr: n, inlier_ratio: 0.5, ..GenSpec::default() }, seed + i as u64).unwrap())
        .collect()
}

#[test]
fn forward_output_contract() {
    let cfg = DetarConfig::desk();
    let p = ModelParams::<f32>::init(&cfg, 25).unwrap();
    let sets = desk_sets(2, 512, 26);
    let batch = Batch::from_sets(&[&sets[0], &sets[1]], DEFAULT_TAU_LABEL).unwrap();
    let out = forward(&p, &batch, BnMode::Eval).unwrap();
    assert_eq!(out.t_est.len(), 2);
    assert_eq!(out.r_est.len(), 2);
    assert_eq!(out.logits.shape(), &[2, 512, 1]);
    assert_eq!(out.weights.shape(), &[2, 512]);
    assert!(out.weights.data().iter().all(|&w| (0.0..1.0).contains(&w)));
    for b in 0..2 {
        assert!(geom::is_rotation(&out.r_est[b], 1e-6));
        assert!(out.probabilities(b).iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert_eq!(out.trace.fx.len(), 10);
    assert_eq!(out.trace.deltas[0].shape(), &[2, 1, 64]);
    assert_eq!(out.trace.t_layers.len(), 10);
    // Target features are never moved.
    for l in 0..10 {
        assert_eq!(out.trace.fy[l].shape(), out.trace.fx[l].shape());
    }
}

#[test]
fn every_source_feature_drifts_by_the_same_offset() {
    let cfg = DetarConfig { k_cfd: 3, ..tiny() };
    let p = ModelParams::<f32>::init(&cfg, 27).unwrap();
    let set = desk_sets(1, 6, 28).remove(0);
    let out = infer(&p, &set).unwrap();
    for l in 0..3 {
        let (pre, post, d) = (&out.trace.fx_pre[l], &out.trace.fx[l], &out.trace.deltas[l]);
        for i in 0..6 {
            for j in 0..8 {
                assert_eq!(post.data()[i * 8 + j], pre.data()[i * 8 + j] + d.data()[j]);
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_permutation_equivariant() {
    let cfg = DetarConfig { n_corr: 64, channels: 16, ..DetarConfig::desk() };
    let mut p = ModelParams::<f32>::init(&cfg, 29).unwrap();
    // Non-trivial running statistics.
    for r in p.bn.values_mut() {
        r.mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.01 * i as f32);
        r.var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + 0.05 * i as f32);
    }
    let set = desk_sets(1, 64, 30).remove(0);
    let base = infer(&p, &set).unwrap();
    assert_eq!(base, infer(&p, &set).unwrap());
    for k in 0..5 {
        let perm = random_perm(64, 200 + k);
        let out = infer(&p, &set.permuted(&perm)).unwrap();
        assert_eq!(out.t_est, base.t_est);
        assert_eq!(out.r_est, base.r_est);
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(out.logits.data()[i].to_bits(), base.logits.data()[src].to_bits());
        }
    }
}

#[test]
fn perfect_logits_and_translation_recover_the_rotation() {
    let spec = GenSpec { n_corr: 200, inlier_ratio: 0.5, noise_sigma: 0.0, rotation_deg: [5.0, 90.0], ..GenSpec::default() };
    for seed in 0..20 {
        let set = generate(&spec, seed).unwrap();
        let gt = set.gt.unwrap();
        // Planted inliers only; the τ labels also admit near-miss outliers.
        let logits: Vec<f64> = set.residuals(&gt).iter().map(|&r| if r < 1e-5 { 10.0 } else { -10.0 }).collect();
        let w = logit_weights(&logits);
        let r = svd_rotation(&set.source(), &set.target(), &gt.t, &w).unwrap();
        assert!(geom::rotation_error_iso(&r, &gt.r).to_radians() < 1e-4);
    }
    assert!(logit_weights(&[-3.0, 0.0, 0.5, 50.0]).iter().all(|w| (0.0..1.0).contains(w)));
}

#[test]
fn ablation_heads() {
    let sets = desk_sets(2, 16, 31);
    let batch = Batch::<f32>::from_sets(&[&sets[0], &sets[1]], DEFAULT_TAU_LABEL).unwrap();
    for (t_head, r_head, use_ceu) in [
        (THead::Svd, RHead::Svd, true),
        (THead::Regress, RHead::Regress, true),
        (THead::Regress, RHead::Svd, false),
    ] {
        let cfg = DetarConfig { t_head, r_head, use_ceu, n_corr: 16, ..tiny() };
        let p = ModelParams::<f32>::init(&cfg, 32).unwrap();
        assert_eq!(p.tensors.contains_key("thead.weight"), t_head == THead::Regress);
        assert_eq!(p.tensors.contains_key("rhead.weight"), r_head == RHead::Regress);
        let out = forward(&p, &batch, BnMode::Train).unwrap();
        for b in 0..2 {
            assert!(geom::is_rotation(&out.r_est[b], 1e-5), "{:?}", out.r_est[b]);
            assert!(out.t_est[b].iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn degenerate_weights_fall_back_to_identity() {
    let cfg = tiny();
    let mut p = ModelParams::<f32>::init(&cfg, 33).unwrap();
    // All logits strongly negative: every weight is zero.
    p.tensors.insert("cls.out.weight".into(), Tensor::zeros(&[8, 1]));
    p.tensors.insert("cls.out.bias".into(), Tensor::full(&[1], -5.0));
    let set = desk_sets(1, 6, 34).remove(0);
    let out = infer(&p, &set).unwrap();
    assert_eq!(out.degenerate, vec![true]);
    assert_eq!(out.r_est[0], geom::IDENTITY);
}

#[test]
fn bn_running_update() {
    let cfg = tiny();
    let mut p = ModelParams::<f32>::init(&cfg, 35).unwrap();
    let set = desk_sets(1, 6, 36).remove(0);
    let batch = Batch::<f32>::from_sets(&[&set], DEFAULT_TAU_LABEL).unwrap();
    let mut g = Graph::new();
    let vars = bind_f32(&mut g, &p, BnMode::Train);
    {
        let net = Net::from_vars(&p.config, vars, &p.bn, BnMode::Train);
        forward_graph(&mut g, &net, &batch.x, &batch.y).unwrap();
    }
    let stats = g.take_bn_stats();
    assert_eq!(stats.len(), p.bn.len());
    let s = stats.iter().find(|s| s.name == "cfd.0.cn.bn1").unwrap().clone();
    p.update_bn(&stats, BN_MOMENTUM).unwrap();
    let r = &p.bn["cfd.0.cn.bn1"];
    for j in 0..8 {
        assert!((r.mean[j] - 0.1 * s.mean[j]).abs() < 1e-7);
        assert!((r.var[j] - (0.9 + 0.1 * s.var[j])).abs() < 1e-6);
    }
}
