//! Straight-line reference implementations used as test oracles. Nothing
//! here touches the autodiff graph.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gbert::model::GBert;
use gbert::numerics::ParamStore;
use gbert::ontology::{CodeType, OntologyTree};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    let p = store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let t = &p.value;
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn row(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `W x` for `W (out, in)`.
fn apply(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `x W + b` for `W (in, out)`.
fn dense(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i]) {
            *o += xi * wij;
        }
    }
    out
}

fn softmax(e: &[f64]) -> Vec<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|x| x / s).collect()
}

/// One graph-attention layer over explicit neighbour lists (centre first).
/// Returns the output rows and the per-head attention weights.
pub fn gat_layer(h: &Mat, lists: &[Vec<usize>], store: &ParamStore<f64>, stage: &str, heads: usize, slope: f64) -> (Mat, Vec<Mat>) {
    let mut out = vec![Vec::new(); lists.len()];
    let mut alphas = Vec::new();
    for k in 0..heads {
        let w = param(store, &format!("{stage}.head{k}.w"));
        let a = row(store, &format!("{stage}.head{k}.a"));
        let m = w.len();
        let mut head_alpha = Vec::new();
        for (c, nb) in lists.iter().enumerate() {
            let center = apply(&w, &h[nb[0]]);
            let projs: Vec<Vec<f64>> = nb.iter().map(|&j| apply(&w, &h[j])).collect();
            let e: Vec<f64> = projs
                .iter()
                .map(|p| {
                    let s: f64 = (0..m).map(|i| a[i] * center[i] + a[m + i] * p[i]).sum();
                    leaky(s, slope)
                })
                .collect();
            let alpha = softmax(&e);
            for i in 0..m {
                let v: f64 = alpha.iter().zip(&projs).map(|(al, p)| al * p[i]).sum();
                out[c].push(leaky(v, slope));
            }
            head_alpha.push(alpha);
        }
        alphas.push(head_alpha);
    }
    (out, alphas)
}

/// Two-stage ontology embedding by explicit loops: stage 1 over
/// `{c} ∪ ch(c)` for every node, stage 2 over `{c} ∪ pa(c)` for every leaf.
pub fn ontology_oracle(tree: &OntologyTree, store: &ParamStore<f64>, prefix: &str, heads: usize, slope: f64) -> Mat {
    let we = param(store, &format!("{prefix}.we"));
    let children: Vec<Vec<usize>> = (0..tree.len())
        .map(|c| std::iter::once(c).chain(tree.ch(c).unwrap().iter().copied()).collect())
        .collect();
    let (enhanced, _) = gat_layer(&we, &children, store, &format!("{prefix}.stage1"), heads, slope);
    let ancestors: Vec<Vec<usize>> =
        tree.leaves().iter().map(|&l| std::iter::once(l).chain(tree.pa(l).unwrap()).collect()).collect();
    gat_layer(&enhanced, &ancestors, store, &format!("{prefix}.stage2"), heads, slope).0
}

pub fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mu) * inv * gain[i] + bias[i]).collect()
}

/// Post-norm transformer over one token sequence; returns the final states.
pub fn encoder_oracle(tokens: &Mat, store: &ParamStore<f64>, layers: usize, heads: usize, eps: f64) -> Mat {
    let mut x = tokens.clone();
    for l in 0..layers {
        let p = |s: &str| param(store, &format!("encoder.layer{l}.{s}"));
        let r = |s: &str| row(store, &format!("encoder.layer{l}.{s}"));
        let h = x[0].len();
        let dh = h / heads;
        let q: Mat = x.iter().map(|t| dense(t, &p("query.w"), &r("query.b"))).collect();
        let k: Mat = x.iter().map(|t| dense(t, &p("key.w"), &r("key.b"))).collect();
        let v: Mat = x.iter().map(|t| dense(t, &p("value.w"), &r("value.b"))).collect();
        let n = x.len();
        let mut ctx = vec![vec![0.0; h]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| a[j] * v[j][c]).sum();
                }
            }
        }
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let attn = dense(&ctx[i], &p("attn_out.w"), &r("attn_out.b"));
            let res: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let x1 = layer_norm(&res, &r("ln1.gain"), &r("ln1.bias"), eps);
            let hid: Vec<f64> = dense(&x1, &p("ffn1.w"), &r("ffn1.b")).into_iter().map(erf_gelu).collect();
            let f = dense(&hid, &p("ffn2.w"), &r("ffn2.b"));
            let res2: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
            next.push(layer_norm(&res2, &r("ln2.gain"), &r("ln2.bias"), eps));
        }
        x = next;
    }
    x
}

/// Leaf rows for one code type, computed by the oracles.
pub fn leaf_rows(model: &GBert<f64>, tree: &OntologyTree) -> Mat {
    let prefix = tree.code_type().short();
    if model.config.use_graph {
        ontology_oracle(tree, &model.store, prefix, model.config.gat_heads, model.config.leaky_slope)
    } else {
        param(&model.store, &format!("{prefix}.table"))
    }
}

/// CLS output of one unmasked visit, by explicit loops end to end.
pub fn visit_oracle(model: &GBert<f64>, leaves: &Mat, codes: &[usize]) -> Vec<f64> {
    let mut tokens = vec![row(&model.store, "encoder.cls")];
    tokens.extend(codes.iter().map(|&c| leaves[c].clone()));
    let c = &model.config;
    encoder_oracle(&tokens, &model.store, c.layers, c.enc_heads, c.ln_eps).remove(0)
}

/// Medication probabilities for visit `t` (1-based) from history means.
pub fn recommend_oracle(model: &GBert<f64>, dx_tree: &OntologyTree, rx_tree: &OntologyTree, dx: &[Vec<usize>], rx: &[Vec<usize>], t: usize) -> Vec<f64> {
    let dl = leaf_rows(model, dx_tree);
    let rl = leaf_rows(model, rx_tree);
    let h = model.config.hidden;
    let mut mean_d = vec![0.0; h];
    let mut mean_m = vec![0.0; h];
    for tau in 0..t - 1 {
        let vd = visit_oracle(model, &dl, &dx[tau]);
        let vm = visit_oracle(model, &rl, &rx[tau]);
        for i in 0..h {
            mean_d[i] += vd[i] / (t - 1) as f64;
            mean_m[i] += vm[i] / (t - 1) as f64;
        }
    }
    let cur = visit_oracle(model, &dl, &dx[t - 1]);
    let feat: Vec<f64> = mean_d.into_iter().chain(mean_m).chain(cur).collect();
    let w1 = param(&model.store, "predict.w1");
    let b = row(&model.store, "predict.bias");
    apply(&w1, &feat).iter().zip(&b).map(|(z, bi)| 1.0 / (1.0 + (-(z + bi)).exp())).collect()
}

/// Summed binary cross-entropy against a label set.
pub fn bce_oracle(logits: &[f64], positives: &[usize]) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let p = 1.0 / (1.0 + (-z).exp());
            if positives.contains(&i) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

pub fn jaccard_oracle(truth: &[usize], pred: &[usize]) -> f64 {
    let a: BTreeSet<_> = truth.iter().collect();
    let b: BTreeSet<_> = pred.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

pub fn f1_oracle(truth: &[usize], pred: &[usize]) -> f64 {
    let a: BTreeSet<_> = truth.iter().collect();
    let b: BTreeSet<_> = pred.iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let tp = a.intersection(&b).count() as f64;
    let p = if b.is_empty() { 0.0 } else { tp / b.len() as f64 };
    let r = if a.is_empty() { 0.0 } else { tp / a.len() as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean over positives of the precision among everything scored at least
/// as high as that positive.
pub fn ap_oracle(truth: &[usize], probs: &[f64]) -> Option<f64> {
    let pos: BTreeSet<usize> = truth.iter().copied().collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&k| {
            let above: Vec<usize> = (0..probs.len()).filter(|&j| probs[j] >= probs[k]).collect();
            above.iter().filter(|j| pos.contains(j)).count() as f64 / above.len() as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Uniformly random recursive tree on `n` nodes.
pub fn random_tree(kind: CodeType, n: usize, rng: &mut impl Rng) -> OntologyTree {
    let edges: Vec<(String, String)> = (1..n).map(|i| (format!("n{i}"), format!("n{}", rng.gen_range(0..i)))).collect();
    OntologyTree::from_edges(kind, "n0", &edges).unwrap()
}

pub fn random_set(rng: &mut impl Rng, universe: usize, max: usize) -> Vec<usize> {
    let k = rng.gen_range(0..=max.min(universe));
    rand::seq::index::sample(rng, universe, k).into_vec()
}
