// Oracles index explicitly to mirror the formulas they check.
#![allow(clippy::needless_range_loop)]

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{neighborhood_start, AttnContext, Graph, Mode, RegressionKind, Var};
use super::params::ParamStore;
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::Error;

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform_range(-1.0, 1.0);
    }
    t
}

fn store_with(params: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in params {
        s.insert(n, t.clone()).unwrap();
    }
    s
}

/// Central finite differences over every element of every parameter.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
fn fd_check(store: &ParamStore, loss: impl Fn(&mut Graph) -> Var, floor: f64) -> f64 {
    let eps = 1e-5;
    let mut g = Graph::new(store, Mode::Eval);
    let root = loss(&mut g);
    let grads = g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, e) in store.entries().iter().enumerate() {
        let id = super::params::ParamId(i);
        for j in 0..e.value.numel() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.entry_mut(id).value.data_mut()[j] += delta;
                let mut g = Graph::new(&s, Mode::Eval);
                let r = loss(&mut g);
                g.value(r).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Contracts the output with fixed random weights so every element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let n = g.value(y).numel();
    let mut rng = RngStream::new(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let wv = g.input(Tensor::new(g.value(y).shape(), w).unwrap());
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

/// Direct summation: out[i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let (n, m, d) = (q.rows(), k.rows(), q.cols());
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut w = vec![0.0; m];
        let mut z = 0.0;
        for j in 0..m {
            if allowed(i, j) {
                let s: f64 = (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (d as f64).sqrt();
                w[j] = s.exp();
                z += w[j];
            }
        }
        for j in 0..m {
            for c in 0..d {
                out[i * d + c] += w[j] / z * v.row(j)[c];
            }
        }
    }
    out
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, ctx: &AttnContext) -> crate::Result<Tensor> {
    let s = ParamStore::new();
    let mut g = Graph::new(&s, Mode::Eval);
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let y = g.attention(qv, kv, vv, heads, ctx)?;
    Ok(g.value(y).clone())
}

#[test]
fn attention_single_key_returns_its_value() {
    let mut rng = RngStream::new(1);
    let q = random(&[3, 4], &mut rng);
    let k = random(&[1, 4], &mut rng);
    let v = random(&[1, 4], &mut rng);
    let y = run_attention(&q, &k, &v, 1, &AttnContext::Full { key_valid: None }).unwrap();
    for i in 0..3 {
        assert_eq!(y.row(i), v.row(0));
    }
}

#[test]
fn attention_zero_logits_average_unpadded_values() {
    let q = Tensor::zeros(&[2, 4]);
    let mut rng = RngStream::new(2);
    let k = random(&[3, 4], &mut rng);
    let v = random(&[3, 4], &mut rng);
    let valid = vec![true, false, true];
    let y = run_attention(&q, &k, &v, 2, &AttnContext::Full { key_valid: Some(valid) }).unwrap();
    for c in 0..4 {
        let mean = (v.row(0)[c] + v.row(2)[c]) / 2.0;
        assert!((y.row(1)[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn attention_matches_direct_summation() {
    let mut rng = RngStream::new(3);
    let q = random(&[3, 4], &mut rng);
    let k = random(&[3, 4], &mut rng);
    let v = random(&[3, 4], &mut rng);
    let y = run_attention(&q, &k, &v, 1, &AttnContext::Full { key_valid: None }).unwrap();
    let oracle = attention_oracle(&q, &k, &v, &|_, _| true);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_fully_padded_context_and_bad_shapes() {
    let q = Tensor::zeros(&[1, 4]);
    let k = Tensor::zeros(&[2, 4]);
    let ctx = AttnContext::Full { key_valid: Some(vec![false, false]) };
    assert_eq!(run_attention(&q, &k, &k, 1, &ctx), Err(Error::EmptyAttention));
    let bad = Tensor::zeros(&[2, 3]);
    assert!(matches!(run_attention(&q, &bad, &bad, 1, &AttnContext::Full { key_valid: None }), Err(Error::Shape(_))));
    assert!(matches!(run_attention(&q, &k, &k, 3, &AttnContext::Full { key_valid: None }), Err(Error::Config(_))));
}

#[test]
fn padded_keys_get_exactly_zero_weight_and_rows_sum_to_one() {
    let mut rng = RngStream::new(4);
    let q = random(&[2, 4], &mut rng);
    let k = random(&[4, 4], &mut rng);
    let mut v = random(&[4, 4], &mut rng);
    let valid = vec![true, false, true, false];
    let ctx = AttnContext::Full { key_valid: Some(valid) };
    let y0 = run_attention(&q, &k, &v, 2, &ctx).unwrap();
    // values of padded keys cannot leak into the output
    v.row_mut(1).iter_mut().for_each(|x| *x = 1e6);
    v.row_mut(3).iter_mut().for_each(|x| *x = -1e6);
    let y1 = run_attention(&q, &k, &v, 2, &ctx).unwrap();
    assert_eq!(y0, y1);
    let p = super::graph::masked_softmax(&[0.3, 9.0, -1.0, 2.0], |j| j != 1).unwrap();
    assert_eq!(p[1], 0.0);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn neighborhood_window_is_clamped() {
    assert_eq!(neighborhood_start(0, 6, 3), 0);
    assert_eq!(neighborhood_start(1, 6, 3), 0);
    assert_eq!(neighborhood_start(3, 6, 3), 2);
    assert_eq!(neighborhood_start(5, 6, 3), 3);
    assert_eq!(neighborhood_start(4, 6, 9), 0);
}

#[test]
fn neighborhood_attention_matches_masked_full_attention() {
    let mut rng = RngStream::new(5);
    let (t, kernel) = (6, 3);
    let q = random(&[t, 4], &mut rng);
    let k = random(&[t, 4], &mut rng);
    let v = random(&[t, 4], &mut rng);
    let y = run_attention(&q, &k, &v, 1, &AttnContext::Neighborhood { batch: 1, len: t, kernel }).unwrap();
    let allowed = |i: usize, j: usize| {
        let s = if i < 1 { 0 } else { (i - 1).min(t - kernel) };
        j >= s && j < s + kernel
    };
    let oracle = attention_oracle(&q, &k, &v, &allowed);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn wide_neighborhood_equals_full_attention() {
    let mut rng = RngStream::new(6);
    let t = 5;
    let q = random(&[t, 4], &mut rng);
    let k = random(&[t, 4], &mut rng);
    let v = random(&[t, 4], &mut rng);
    let full = run_attention(&q, &k, &v, 2, &AttnContext::Full { key_valid: None }).unwrap();
    let nat = run_attention(&q, &k, &v, 2, &AttnContext::Neighborhood { batch: 1, len: t, kernel: 2 * t - 1 }).unwrap();
    assert!(full.max_abs_diff(&nat) < 1e-15);
    let even = run_attention(&q, &k, &v, 2, &AttnContext::Neighborhood { batch: 1, len: t, kernel: 4 });
    assert!(matches!(even, Err(Error::Config(_))));
}

#[test]
fn layer_norm_fixtures() {
    let s = store_with(&[("g", Tensor::full(&[2], 1.0)), ("b", Tensor::zeros(&[2]))]);
    let mut g = Graph::new(&s, Mode::Eval);
    let x = g.input(Tensor::from_rows(&[&[3.0, 3.0], &[1.0, -1.0]]).unwrap());
    let (gm, bt) = (g.param("g").unwrap(), g.param("b").unwrap());
    let y = g.layer_norm(x, gm, bt).unwrap();
    let y = g.value(y);
    assert_eq!(y.row(0), &[0.0, 0.0]);
    assert!((y.row(1)[0] - 1.0).abs() < 1e-5 && (y.row(1)[1] + 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut rng = RngStream::new(7);
    let c = 7;
    let s = store_with(&[("g", Tensor::full(&[c], 1.0)), ("b", Tensor::zeros(&[c]))]);
    let mut g = Graph::new(&s, Mode::Eval);
    let mut xt = random(&[5, c], &mut rng);
    // eps in the denominator shrinks the variance by var / (var + eps)
    xt.data_mut().iter_mut().for_each(|v| *v *= 100.0);
    let x = g.input(xt);
    let (gm, bt) = (g.param("g").unwrap(), g.param("b").unwrap());
    let y = g.layer_norm(x, gm, bt).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn conv1d_identity_kernel_and_lengths() {
    let c = 3;
    let mut w = Tensor::zeros(&[c, c, 3]);
    for i in 0..c {
        w.data_mut()[(i * c + i) * 3 + 1] = 1.0;
    }
    let s = store_with(&[("w", w), ("b", Tensor::zeros(&[c]))]);
    let mut rng = RngStream::new(8);
    let xt = random(&[2 * 5, c], &mut rng);
    let mut g = Graph::new(&s, Mode::Eval);
    let x = g.input(xt.clone());
    let (wv, bv) = (g.param("w").unwrap(), g.param("b").unwrap());
    let y = g.conv1d(x, wv, bv, 2, 5, 1).unwrap();
    assert_eq!(g.value(y), &xt);
    for (len, expect) in [(50, 25), (25, 13)] {
        let x = g.input(Tensor::zeros(&[len, c]));
        let y = g.conv1d(x, wv, bv, 1, len, 2).unwrap();
        assert_eq!(g.value(y).rows(), expect);
    }
    let x = g.input(Tensor::zeros(&[0, c]));
    assert!(g.conv1d(x, wv, bv, 1, 0, 1).is_err());
}

#[test]
fn conv1d_matches_nested_loops() {
    let mut rng = RngStream::new(9);
    let (t, c_in, c_out) = (5, 2, 3);
    for stride in [1, 2] {
        let w = random(&[c_out, c_in, 3], &mut rng);
        let b = random(&[c_out], &mut rng);
        let xt = random(&[t, c_in], &mut rng);
        let s = store_with(&[("w", w.clone()), ("b", b.clone())]);
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(xt.clone());
        let (wv, bv) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y = g.conv1d(x, wv, bv, 1, t, stride).unwrap();
        let y = g.value(y);
        let t_out = t.div_ceil(stride);
        for to in 0..t_out {
            for o in 0..c_out {
                let mut acc = b.data()[o];
                for j in 0..3i64 {
                    let p = (to * stride) as i64 + j - 1;
                    if p < 0 || p >= t as i64 {
                        continue;
                    }
                    for ci in 0..c_in {
                        acc += w.data()[(o * c_in + ci) * 3 + j as usize] * xt.row(p as usize)[ci];
                    }
                }
                assert!((y.row(to)[o] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn max_pool_fixtures() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s, Mode::Eval);
    let x = g.input(Tensor::from_rows(&[&[1.0, 5.0], &[3.0, -1.0], &[9.0, 9.0]]).unwrap());
    let y = g.masked_max_pool(x, 3, &[true, true, false]).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    let y = g.masked_max_pool(x, 3, &[false, true, false]).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    assert_eq!(g.masked_max_pool(x, 3, &[false; 3]), Err(Error::EmptyPolyline));
    // permutation of rows within the group
    let xp = g.input(Tensor::from_rows(&[&[9.0, 9.0], &[1.0, 5.0], &[3.0, -1.0]]).unwrap());
    let a = g.masked_max_pool(x, 3, &[true; 3]).unwrap();
    let b = g.masked_max_pool(xp, 3, &[true; 3]).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn elementary_loss_fixtures() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s, Mode::Eval);
    let p = g.input(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let target = [0.5, 1.5, 2.5, 3.5];
    let w = [0.25; 4];
    for (kind, expect) in [(RegressionKind::L1, 0.5), (RegressionKind::Mse, 0.25), (RegressionKind::Huber, 0.125)] {
        let l = g.regression_loss(kind, p, &target, &w).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-15);
        let l = g.regression_loss(kind, p, &[1.0, 2.0, 3.0, 4.0], &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
    let logits = g.input(Tensor::zeros(&[1, 6]));
    let ce = g.cross_entropy(logits, &[2], &[1.0]).unwrap();
    assert!((g.value(ce).item() - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn backward_basics() {
    let w0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let s = store_with(&[("w", w0.clone()), ("unused", Tensor::full(&[2], 1.0))]);
    let mut g = Graph::new(&s, Mode::Eval);
    let w = g.param("w").unwrap();
    let _ = g.param("unused").unwrap();
    let ww = g.mul(w, w).unwrap();
    let l = g.sum(ww);
    assert!(matches!(g.backward(ww), Err(Error::NonScalarRoot(_))));
    let grads = g.backward(l).unwrap();
    let gw = grads.get(s.id("w").unwrap()).unwrap();
    for (a, b) in gw.data().iter().zip(w0.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    assert!(grads.get(s.id("unused").unwrap()).is_none());
    assert_eq!(g.backward(l), Err(Error::TapeConsumed));
    // absent gradients leave the slot at zero after accumulation
    let mut s2 = s.clone();
    s2.accumulate(&grads, 1.0).unwrap();
    assert_eq!(s2.grad("unused").unwrap().data(), &[0.0, 0.0]);
}

fn op_params(rng: &mut RngStream) -> ParamStore {
    let c = 4;
    store_with(&[
        ("x", random(&[5, c], rng)),
        ("y", random(&[5, c], rng)),
        ("w", random(&[c, c], rng)),
        ("b", random(&[c], rng)),
        ("cw", random(&[c, c, 3], rng)),
        ("gamma", random(&[c], rng)),
        ("beta", random(&[c], rng)),
        ("wq", random(&[c, c], rng)),
        ("wk", random(&[c, c], rng)),
        ("wv", random(&[c, c], rng)),
        ("wo", random(&[c, c], rng)),
    ])
}

fn p(g: &mut Graph, n: &str) -> Var {
    g.param(n).unwrap()
}

#[test]
fn gradients_match_finite_differences_per_op() {
    let mut rng = RngStream::new(10);
    let store = op_params(&mut rng);
    type Case<'a> = (String, &'a dyn Fn(&mut Graph) -> Var);
    let cases: Vec<Case> = vec![
        ("linear".into(), &|g| {
            let (x, w, b) = (p(g, "x"), p(g, "w"), p(g, "b"));
            let y = g.linear(x, w, Some(b)).unwrap();
            probe(g, y, 1)
        }),
        ("add_sub_mul_scale".into(), &|g| {
            let (x, y) = (p(g, "x"), p(g, "y"));
            let a = g.add(x, y).unwrap();
            let m = g.mul(a, x).unwrap();
            let s = g.sub(m, y).unwrap();
            let s = g.scale(s, 0.7);
            probe(g, s, 2)
        }),
        ("gelu".into(), &|g| {
            let x = p(g, "x");
            let y = g.gelu(x);
            probe(g, y, 3)
        }),
        ("layer_norm".into(), &|g| {
            let (x, gm, bt) = (p(g, "x"), p(g, "gamma"), p(g, "beta"));
            let y = g.layer_norm(x, gm, bt).unwrap();
            probe(g, y, 4)
        }),
        ("conv1d_stride1".into(), &|g| {
            let (x, w, b) = (p(g, "x"), p(g, "cw"), p(g, "b"));
            let y = g.conv1d(x, w, b, 1, 5, 1).unwrap();
            probe(g, y, 5)
        }),
        ("conv1d_stride2_upsample".into(), &|g| {
            let (x, w, b) = (p(g, "x"), p(g, "cw"), p(g, "b"));
            let y = g.conv1d(x, w, b, 1, 5, 2).unwrap();
            let u = g.upsample2(y, 1, 3, 5).unwrap();
            probe(g, u, 6)
        }),
        ("gather_concat_reshape".into(), &|g| {
            let (x, y) = (p(g, "x"), p(g, "y"));
            let a = g.gather_rows(x, &[4, 0, 0, 2]).unwrap();
            let c = g.concat_rows(&[a, y]).unwrap();
            let r = g.reshape(c, &[9, 2, 2]).unwrap();
            probe(g, r, 7)
        }),
        ("max_pool".into(), &|g| {
            let x = p(g, "x");
            let y = g.masked_max_pool(x, 5, &[true, false, true, true, true]).unwrap();
            probe(g, y, 8)
        }),
        ("multi_head_attention".into(), &|g| {
            let (x, y) = (p(g, "x"), p(g, "y"));
            let (wq, wk, wv, wo) = (p(g, "wq"), p(g, "wk"), p(g, "wv"), p(g, "wo"));
            let q = g.linear(x, wq, None).unwrap();
            let k = g.linear(y, wk, None).unwrap();
            let v = g.linear(y, wv, None).unwrap();
            let ctx = AttnContext::Full { key_valid: Some(vec![true, true, false, true, true]) };
            let a = g.attention(q, k, v, 2, &ctx).unwrap();
            let o = g.linear(a, wo, None).unwrap();
            probe(g, o, 9)
        }),
        ("neighborhood_attention".into(), &|g| {
            let x = p(g, "x");
            let (wq, wk, wv) = (p(g, "wq"), p(g, "wk"), p(g, "wv"));
            let q = g.linear(x, wq, None).unwrap();
            let k = g.linear(x, wk, None).unwrap();
            let v = g.linear(x, wv, None).unwrap();
            let a = g.attention(q, k, v, 2, &AttnContext::Neighborhood { batch: 1, len: 5, kernel: 3 }).unwrap();
            probe(g, a, 10)
        }),
        ("regression_losses".into(), &|g| {
            let x = p(g, "x");
            let n = 20;
            let target: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
            let w: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 0.1 }).collect();
            let a = g.regression_loss(RegressionKind::L1, x, &target, &w).unwrap();
            let b = g.regression_loss(RegressionKind::Mse, x, &target, &w).unwrap();
            let c = g.regression_loss(RegressionKind::Huber, x, &target, &w).unwrap();
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        }),
        ("cross_entropy".into(), &|g| {
            let x = p(g, "x");
            g.cross_entropy(x, &[0, 3, 1, 2, 2], &[0.2, 0.2, 0.2, 0.0, 0.4]).unwrap()
        }),
    ];
    for (name, f) in cases {
        let err = fd_check(&store, f, 1e-8);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn multi_head_attention_is_invariant_to_key_permutation() {
    let mut rng = RngStream::new(11);
    let store = op_params(&mut rng);
    let run = |perm: &[usize]| {
        let mut g = Graph::new(&store, Mode::Eval);
        let (x, y) = (p(&mut g, "x"), p(&mut g, "y"));
        let y = g.gather_rows(y, perm).unwrap();
        let (wq, wk, wv) = (p(&mut g, "wq"), p(&mut g, "wk"), p(&mut g, "wv"));
        let q = g.linear(x, wq, None).unwrap();
        let k = g.linear(y, wk, None).unwrap();
        let v = g.linear(y, wv, None).unwrap();
        let a = g.attention(q, k, v, 2, &AttnContext::Full { key_valid: None }).unwrap();
        g.value(a).clone()
    };
    let a = run(&[0, 1, 2, 3, 4]);
    let b = run(&[3, 1, 4, 0, 2]);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_train() {
    let s = ParamStore::new();
    let xt = Tensor::full(&[100], 1.0);
    let mut g = Graph::new(&s, Mode::Eval);
    let x = g.input(xt.clone());
    assert_eq!(g.dropout(x, 0.2), x);
    let run = |seed| {
        let mut g = Graph::new(&s, Mode::Train { seed });
        let x = g.input(xt.clone());
        let y = g.dropout(x, 0.2);
        g.value(y).clone()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    assert!(a.data().contains(&0.0));
}
