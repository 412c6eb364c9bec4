//! Prompt-guided feature extraction.
//!
//! A semi-soft prompt (fixed words spliced into learnable embeddings) is encoded
//! by a one-layer pre-norm transformer encoder. The encoding then filters the
//! fused sequence: keys and values mix the fused tokens with the prompt tokens
//! through a sigmoid ratio weight, a gate computed from both pooled sequences
//! scales the attended features, and a stochastic-depth residual of the fused
//! sequence is added before a final layer norm.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{forward, Axis, Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::fusion::ratio_sigmoid;
use crate::layers::{self, ffn_specs, ln_specs, mha_specs};
use crate::params::ParamSpec;
use crate::rng::Stream;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub d: usize,
    pub heads: usize,
    pub n_learned: usize,
    pub insert_pos: usize,
    pub p_drop: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            d: 16,
            heads: 4,
            n_learned: 8,
            insert_pos: 0,
            p_drop: 0.1,
        }
    }
}

/// One position of the prompt sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSlot {
    Human(usize),
    Learned(usize),
}

/// Human tokens spliced into `n_learned` learnable embeddings at `insert_pos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sstc {
    pub human_tokens: Vec<usize>,
    pub n_learned: usize,
    pub insert_pos: usize,
}

impl Sstc {
    pub fn len(&self) -> usize {
        self.human_tokens.len() + self.n_learned
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> Vec<PromptSlot> {
        let mut v: Vec<PromptSlot> = (0..self.insert_pos).map(PromptSlot::Learned).collect();
        v.extend(self.human_tokens.iter().map(|&t| PromptSlot::Human(t)));
        v.extend((self.insert_pos..self.n_learned).map(PromptSlot::Learned));
        v
    }
}

/// Tokenize the configured prompt of `task` and place it at `insert_pos`.
pub fn build_sstc(
    task: &str,
    prompts: &BTreeMap<String, String>,
    vocab: &Vocabulary,
    n_learned: usize,
    insert_pos: usize,
) -> Result<Sstc> {
    let prompt = prompts.get(task).ok_or_else(|| Error::UnknownTask(task.into()))?;
    if insert_pos > n_learned {
        return Err(Error::InvalidInput(format!(
            "insert position {} outside [0, {}]",
            insert_pos, n_learned
        )));
    }
    let human_tokens = vocab.tokenize(prompt)?;
    if human_tokens.is_empty() && n_learned == 0 {
        return Err(Error::InvalidInput("empty prompt sequence".into()));
    }
    Ok(Sstc {
        human_tokens,
        n_learned,
        insert_pos,
    })
}

pub const TOK_EMB: &str = "guidance.tok_emb";
pub const POS_EMB: &str = "guidance.pos_emb";
pub const LEARNED: &str = "guidance.sstc.learned";

pub fn param_specs(cfg: &GuidanceConfig, vocab_len: usize, prompt_len: usize) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut v = vec![
        ParamSpec::weight(TOK_EMB, vocab_len, d),
        ParamSpec::weight(POS_EMB, prompt_len, d),
    ];
    if cfg.n_learned > 0 {
        v.push(ParamSpec::weight(LEARNED, cfg.n_learned, d));
    }
    v.extend(ln_specs("guidance.enc.ln1", d));
    v.extend(mha_specs("guidance.enc.attn", d));
    v.extend(ln_specs("guidance.enc.ln2", d));
    v.extend(ffn_specs("guidance.enc.ffn", d, 4 * d));
    v.extend(ln_specs("guidance.enc.ln_f", d));
    v.push(ParamSpec::weight("guidance.w_q", d, d));
    v.push(ParamSpec::weight("guidance.w_k", d, d));
    v.push(ParamSpec::weight("guidance.w_v", d, d));
    v.push(ParamSpec::weight("guidance.proj.w", d, d));
    v.push(ParamSpec::bias("guidance.proj.b", d));
    v.push(ParamSpec::weight("guidance.gate.w", 2 * d, d));
    v.push(ParamSpec::bias("guidance.gate.b", d));
    v.extend(ln_specs("guidance.ln", d));
    v
}

#[derive(Debug, Clone)]
pub struct EncodedNodes {
    /// Embedded prompt (token + position embeddings) before the encoder.
    pub embedded: NodeId,
    pub z_c: NodeId,
    pub attn: Vec<NodeId>,
}

/// Embed and encode the prompt sequence.
pub fn encode_nodes(g: &mut Graph, sstc: &Sstc, cfg: &GuidanceConfig, vocab_len: usize) -> EncodedNodes {
    let d = cfg.d;
    let n_h = sstc.human_tokens.len();
    let mut parts = Vec::new();
    let learned = (sstc.n_learned > 0).then(|| g.param(LEARNED, sstc.n_learned, d));
    if sstc.insert_pos > 0 {
        parts.push(g.slice(learned.unwrap(), Axis::Rows, 0, sstc.insert_pos));
    }
    if n_h > 0 {
        let mut onehot = Tensor::zeros(n_h, vocab_len);
        for (r, &t) in sstc.human_tokens.iter().enumerate() {
            onehot.set(r, t, 1.0);
        }
        let oh = g.constant(onehot);
        let table = g.param(TOK_EMB, vocab_len, d);
        parts.push(g.matmul(oh, table));
    }
    if sstc.insert_pos < sstc.n_learned {
        let rest = sstc.n_learned - sstc.insert_pos;
        parts.push(g.slice(learned.unwrap(), Axis::Rows, sstc.insert_pos, rest));
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, Axis::Rows) };
    let pos = g.param(POS_EMB, sstc.len(), d);
    let embedded = g.add(x, pos);

    let h = layers::layer_norm(g, embedded, "guidance.enc.ln1");
    let att = layers::multi_head(g, "guidance.enc.attn", cfg.heads, h, h, None);
    let x1 = g.add(embedded, att.out);
    let h2 = layers::layer_norm(g, x1, "guidance.enc.ln2");
    let f = layers::ffn(g, h2, "guidance.enc.ffn", 4 * d);
    let x2 = g.add(x1, f);
    let z_c = layers::layer_norm(g, x2, "guidance.enc.ln_f");
    EncodedNodes {
        embedded,
        z_c,
        attn: att.weights,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuidedNodes {
    pub z_all_c: NodeId,
    /// `N_a x max(N_a, T_c)` attention; keys past `N_a` are masked.
    pub attn: NodeId,
    pub gate: NodeId,
    pub mix_weight: NodeId,
    pub attended: NodeId,
}

fn pad_rows(g: &mut Graph, x: NodeId, to: usize) -> NodeId {
    let [r, c] = g.dims(x);
    if r >= to {
        return x;
    }
    let z = g.constant(Tensor::zeros(to - r, c));
    g.concat(&[x, z], Axis::Rows)
}

/// Key mask for `n_a` query rows over `n` keys: keys at positions `>= n_a`
/// (padding of the fused sequence) are blocked.
pub fn pad_mask(n_a: usize, n: usize) -> Vec<bool> {
    (0..n_a * n).map(|k| k % n >= n_a).collect()
}

/// Filter the fused sequence `z_all` with the encoded prompt `z_c`.
/// `residual_scale` is the stochastic-depth factor applied to the residual
/// (1 in evaluation, 0 or `1/(1-p)` in training).
pub fn guide_nodes(g: &mut Graph, z_all: NodeId, z_c: NodeId, residual_scale: f64) -> GuidedNodes {
    let [n_a, d] = g.dims(z_all);
    let t_c = g.rows(z_c);
    let n = n_a.max(t_c);
    let za = pad_rows(g, z_all, n);
    let zc = pad_rows(g, z_c, n);
    let wq = g.param("guidance.w_q", d, d);
    let wk = g.param("guidance.w_k", d, d);
    let wv = g.param("guidance.w_v", d, d);
    let pw = g.param("guidance.proj.w", d, d);
    let pb = g.param("guidance.proj.b", 1, d);
    let q = g.matmul(z_all, wq);
    let proj = |g: &mut Graph, x: NodeId, w: NodeId| {
        let y = g.matmul(x, w);
        g.affine(y, pw, pb)
    };
    let pka = proj(g, za, wk);
    let pva = proj(g, za, wv);
    let pkc = proj(g, zc, wk);
    let pvc = proj(g, zc, wv);
    let sk = g.add(pka, pkc);
    let sv = g.add(pva, pvc);
    let lam = ratio_sigmoid(g, sk, sv);
    let neg = g.scale(lam, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let mix = |g: &mut Graph, a: NodeId, c: NodeId| {
        let x = g.mul(lam, a);
        let y = g.mul(rest, c);
        g.add(x, y)
    };
    let k = mix(g, pka, pkc);
    let v = mix(g, pva, pvc);
    let mask = (n > n_a).then(|| pad_mask(n_a, n));
    let (attended, attn) = layers::scaled_dot(g, q, k, v, mask.as_deref());

    let pa = g.mean(z_all, Axis::Rows);
    let pc = g.mean(z_c, Axis::Rows);
    let cat = g.concat(&[pa, pc], Axis::Cols);
    let gw = g.param("guidance.gate.w", 2 * d, d);
    let gb = g.param("guidance.gate.b", 1, d);
    let logits = g.affine(cat, gw, gb);
    let gate = g.sigmoid(logits);

    let gated = g.mul(gate, attended);
    let residual = if residual_scale == 1.0 {
        z_all
    } else {
        g.scale(z_all, residual_scale)
    };
    let sum = g.add(gated, residual);
    let z_all_c = layers::layer_norm(g, sum, "guidance.ln");
    GuidedNodes {
        z_all_c,
        attn,
        gate,
        mix_weight: lam,
        attended,
    }
}

/// Train or evaluation behaviour of stochastic depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-sample stochastic-depth factor: identity in evaluation; in training the
/// residual is dropped with probability `p_drop` and scaled by `1/(1-p_drop)`
/// when kept.
pub fn residual_scale(mode: Mode, p_drop: f64, rng: &mut Stream) -> f64 {
    match mode {
        Mode::Eval => 1.0,
        Mode::Train if p_drop <= 0.0 => 1.0,
        Mode::Train => {
            if rng.bernoulli(p_drop) {
                0.0
            } else {
                1.0 / (1.0 - p_drop)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEncoding {
    pub z_c: Tensor,
}

pub fn encode_guidance(sstc: &Sstc, cfg: &GuidanceConfig, vocab_len: usize, params: &TensorMap) -> Result<GuidanceEncoding> {
    let mut g = Graph::new();
    let enc = encode_nodes(&mut g, sstc, cfg, vocab_len);
    let ev = forward(&g, params)?;
    Ok(GuidanceEncoding {
        z_c: ev.value(enc.z_c).clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedFeatures {
    pub z_all_c: Tensor,
    pub gate: Tensor,
    pub attn: Tensor,
    pub p_drop: f64,
}

pub fn guide_features(
    z_all: &Tensor,
    enc: &GuidanceEncoding,
    params: &TensorMap,
    mode: Mode,
    p_drop: f64,
    rng: &mut Stream,
) -> Result<GuidedFeatures> {
    let mut g = Graph::new();
    let za = g.constant(z_all.clone());
    let zc = g.constant(enc.z_c.clone());
    let scale = residual_scale(mode, p_drop, rng);
    let nodes = guide_nodes(&mut g, za, zc, scale);
    let ev = forward(&g, params)?;
    Ok(GuidedFeatures {
        z_all_c: ev.value(nodes.z_all_c).clone(),
        gate: ev.value(nodes.gate).clone(),
        attn: ev.value(nodes.attn).clone(),
        p_drop,
    })
}
