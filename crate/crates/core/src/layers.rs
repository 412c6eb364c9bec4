//! Transformer building blocks shared by the guidance encoder and the decoder.

use alloc::format;
use alloc::vec::Vec;

use crate::diff::{Axis, Graph, NodeId};
use crate::params::{layer_norm_specs, ParamSpec};

pub const LN_EPS: f64 = 1e-5;

/// Output of an attention call: the attended values and, per head, the
/// `queries x keys` weight matrix.
#[derive(Debug, Clone)]
pub struct Attended {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
}

/// `softmax(q k^T / sqrt(d_k)) v`; `mask[i * n_k + j]` blocks key `j` for query `i`.
pub fn scaled_dot(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, mask: Option<&[bool]>) -> (NodeId, NodeId) {
    let dk = g.cols(k) as f64;
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / libm::sqrt(dk));
    let logits = match mask {
        Some(m) => g.masked_fill(logits, m.to_vec()),
        None => logits,
    };
    let w = g.softmax(logits);
    (g.matmul(w, v), w)
}

/// Projections of multi-head attention. Keys carry no bias: a shared key
/// offset shifts every logit of a row equally and cancels in the softmax.
pub fn mha_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for p in ["q", "k", "v", "o"] {
        v.push(ParamSpec::weight(format!("{}.w{}", prefix, p), d, d));
        if p != "k" {
            v.push(ParamSpec::bias(format!("{}.b{}", prefix, p), d));
        }
    }
    v
}

fn linear(g: &mut Graph, x: NodeId, prefix: &str, name: &str, d_in: usize, d_out: usize) -> NodeId {
    let w = g.param(&format!("{}.w{}", prefix, name), d_in, d_out);
    let b = g.param(&format!("{}.b{}", prefix, name), 1, d_out);
    g.affine(x, w, b)
}

/// Multi-head attention with input/output projections. Head `h` works on
/// feature columns `[h * d/heads, (h+1) * d/heads)`.
pub fn multi_head(
    g: &mut Graph,
    prefix: &str,
    heads: usize,
    xq: NodeId,
    xkv: NodeId,
    mask: Option<&[bool]>,
) -> Attended {
    let d = g.cols(xq);
    debug_assert!(heads > 0 && d % heads == 0);
    let dh = d / heads;
    let q = linear(g, xq, prefix, "q", d, d);
    let wk = g.param(&format!("{}.wk", prefix), d, d);
    let k = g.matmul(xkv, wk);
    let v = linear(g, xkv, prefix, "v", d, d);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, Axis::Cols, h * dh, dh);
        let kh = g.slice(k, Axis::Cols, h * dh, dh);
        let vh = g.slice(v, Axis::Cols, h * dh, dh);
        let (o, w) = scaled_dot(g, qh, kh, vh, mask);
        outs.push(o);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, Axis::Cols) };
    let out = linear(g, cat, prefix, "o", d, d);
    Attended { out, weights }
}

pub fn ln_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    layer_norm_specs(prefix, d).into()
}

/// Layer norm followed by the learnable gain `{prefix}.g` and bias `{prefix}.b`.
pub fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let d = g.cols(x);
    let n = g.layer_norm(x, LN_EPS);
    let gain = g.param(&format!("{}.g", prefix), 1, d);
    let bias = g.param(&format!("{}.b", prefix), 1, d);
    let scaled = g.mul(n, gain);
    g.add(scaled, bias)
}

pub fn ffn_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    alloc::vec![
        ParamSpec::weight(format!("{}.w1", prefix), d, hidden),
        ParamSpec::bias(format!("{}.b1", prefix), hidden),
        ParamSpec::weight(format!("{}.w2", prefix), hidden, d),
        ParamSpec::bias(format!("{}.b2", prefix), d),
    ]
}

/// Two-layer ReLU feed-forward network.
pub fn ffn(g: &mut Graph, x: NodeId, prefix: &str, hidden: usize) -> NodeId {
    let d = g.cols(x);
    let h = linear(g, x, prefix, "1", d, hidden);
    let h = g.relu(h);
    linear(g, h, prefix, "2", hidden, d)
}

/// Causal mask for `n` positions: query `i` may not see key `j > i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n > k / n).collect()
}

/// Mean of each weight matrix over heads, `queries x keys`.
pub fn head_mean(g: &crate::diff::Evaluation, weights: &[NodeId]) -> crate::diff::Tensor {
    let mut acc = g.value(weights[0]).clone();
    for w in &weights[1..] {
        acc.add_assign(g.value(*w));
    }
    let n = weights.len() as f64;
    acc.map(|x| x / n)
}
