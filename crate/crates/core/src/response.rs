//! Task heads on top of the guided sequence: candidate-answer scoring with a
//! one-layer transformer decoder, the survival risk head, and per-modality
//! retrieval projections.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{forward, Axis, Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::layers::{self, causal_mask, ffn_specs, ln_specs, mha_specs};
use crate::modality::Modality;
use crate::params::ParamSpec;

pub const TOK_EMB: &str = "response.tok_emb";
pub const POS_EMB: &str = "response.pos_emb";
pub const OUT_W: &str = "response.out.w";
pub const OUT_B: &str = "response.out.b";
pub const RISK_W: &str = "response.risk.w";
pub const RISK_B: &str = "response.risk.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub vocab_len: usize,
    /// Longest candidate (in tokens) the position table covers.
    pub max_len: usize,
    pub start_id: usize,
}

pub fn decoder_specs(cfg: &DecoderConfig) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut v = vec![
        ParamSpec::weight(TOK_EMB, cfg.vocab_len, d),
        ParamSpec::weight(POS_EMB, cfg.max_len, d),
    ];
    v.extend(ln_specs("response.dec.ln1", d));
    v.extend(mha_specs("response.dec.self", d));
    v.extend(ln_specs("response.dec.ln2", d));
    v.extend(mha_specs("response.dec.cross", d));
    v.extend(ln_specs("response.dec.ln3", d));
    v.extend(ffn_specs("response.dec.ffn", d, 4 * d));
    v.extend(ln_specs("response.dec.ln_f", d));
    v.push(ParamSpec::weight(OUT_W, d, cfg.vocab_len));
    v.push(ParamSpec::bias(OUT_B, cfg.vocab_len));
    v
}

pub fn risk_specs(d: usize) -> Vec<ParamSpec> {
    vec![ParamSpec::weight(RISK_W, d, 1), ParamSpec::bias(RISK_B, 1)]
}

pub fn retrieval_specs(d: usize, d_r: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for m in Modality::ALL {
        v.push(ParamSpec::weight(format!("response.retr.{}.w", m.tag()), d, d_r));
        v.push(ParamSpec::bias(format!("response.retr.{}.b", m.tag()), d_r));
    }
    v
}

fn one_hot(ids: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(ids.len(), width);
    for (r, &i) in ids.iter().enumerate() {
        t.set(r, i, 1.0);
    }
    t
}

#[derive(Debug, Clone)]
pub struct ScoreNodes {
    pub total: NodeId,
    pub mean: NodeId,
    /// Cross-attention weights per head, `k x N_a`.
    pub cross: Vec<NodeId>,
}

/// Teacher-forced log-likelihood of `candidate` given `memory`.
/// The decoder reads `[<s>, a_1 .. a_{k-1}]` and predicts `a_1 .. a_k`.
pub fn score_nodes(g: &mut Graph, memory: NodeId, candidate: &[usize], cfg: &DecoderConfig) -> Result<ScoreNodes> {
    let k = candidate.len();
    if k == 0 {
        return Err(Error::InvalidInput("empty candidate".into()));
    }
    if k > cfg.max_len {
        return Err(Error::InvalidInput(format!(
            "candidate of {} tokens exceeds decoder length {}",
            k, cfg.max_len
        )));
    }
    if let Some(&bad) = candidate.iter().find(|&&t| t >= cfg.vocab_len) {
        return Err(Error::InvalidInput(format!("token id {} outside vocabulary", bad)));
    }
    let d = cfg.d;
    let mut input = vec![cfg.start_id];
    input.extend_from_slice(&candidate[..k - 1]);
    let oh_in = g.constant(one_hot(&input, cfg.vocab_len));
    let table = g.param(TOK_EMB, cfg.vocab_len, d);
    let emb = g.matmul(oh_in, table);
    let pos_all = g.param(POS_EMB, cfg.max_len, d);
    let pos = if k == cfg.max_len {
        pos_all
    } else {
        g.slice(pos_all, Axis::Rows, 0, k)
    };
    let x0 = g.add(emb, pos);

    let h = layers::layer_norm(g, x0, "response.dec.ln1");
    let mask = causal_mask(k);
    let sa = layers::multi_head(g, "response.dec.self", cfg.heads, h, h, Some(&mask));
    let x1 = g.add(x0, sa.out);
    let h = layers::layer_norm(g, x1, "response.dec.ln2");
    let ca = layers::multi_head(g, "response.dec.cross", cfg.heads, h, memory, None);
    let x2 = g.add(x1, ca.out);
    let h = layers::layer_norm(g, x2, "response.dec.ln3");
    let f = layers::ffn(g, h, "response.dec.ffn", 4 * d);
    let x3 = g.add(x2, f);
    let o = layers::layer_norm(g, x3, "response.dec.ln_f");

    let w = g.param(OUT_W, d, cfg.vocab_len);
    let b = g.param(OUT_B, 1, cfg.vocab_len);
    let logits = g.affine(o, w, b);
    let lp = g.log_softmax(logits);
    let pick = g.constant(one_hot(candidate, cfg.vocab_len));
    let picked = g.mul(lp, pick);
    let total = g.sum_all(picked);
    let mean = g.scale(total, 1.0 / k as f64);
    Ok(ScoreNodes {
        total,
        mean,
        cross: ca.weights,
    })
}

/// Scalar risk `w . mean_rows(memory) + b`.
pub fn risk_node(g: &mut Graph, memory: NodeId) -> NodeId {
    let d = g.cols(memory);
    let pooled = g.mean(memory, Axis::Rows);
    let w = g.param(RISK_W, d, 1);
    let b = g.param(RISK_B, 1, 1);
    g.affine(pooled, w, b)
}

/// L2-normalized retrieval embeddings for a stack of pooled `n x d` rows.
pub fn retrieval_node(g: &mut Graph, m: Modality, pooled: NodeId, d_r: usize) -> NodeId {
    let d = g.cols(pooled);
    let w = g.param(&format!("response.retr.{}.w", m.tag()), d, d_r);
    let b = g.param(&format!("response.retr.{}.b", m.tag()), 1, d_r);
    let y = g.affine(pooled, w, b);
    g.l2_normalize_rows(y)
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub total_loglik: f64,
    pub mean_loglik: f64,
}

pub fn score_candidate(memory: &Tensor, candidate: &[usize], cfg: &DecoderConfig, params: &TensorMap) -> Result<CandidateScore> {
    let mut g = Graph::new();
    let mem = g.constant(memory.clone());
    let s = score_nodes(&mut g, mem, candidate, cfg)?;
    let ev = forward(&g, params)?;
    Ok(CandidateScore {
        total_loglik: ev.value(s.total).item(),
        mean_loglik: ev.value(s.mean).item(),
    })
}

/// Index of the highest mean log-likelihood; ties go to the lowest index.
pub fn argmax_candidate(scores: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b].mean_loglik >= s.mean_loglik => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub scores: Vec<CandidateScore>,
}

pub fn predict(memory: &Tensor, candidates: &[Vec<usize>], cfg: &DecoderConfig, params: &TensorMap) -> Result<Prediction> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| score_candidate(memory, c, cfg, params))
        .collect::<Result<Vec<_>>>()?;
    let index = argmax_candidate(&scores).unwrap();
    Ok(Prediction { index, scores })
}

pub fn risk_score(memory: &Tensor, params: &TensorMap) -> Result<f64> {
    let mut g = Graph::new();
    let mem = g.constant(memory.clone());
    let r = risk_node(&mut g, mem);
    Ok(forward(&g, params)?.value(r).item())
}

/// Retrieval embedding of one modality from its `L x d` token sequence.
pub fn retrieval_embed(tokens: &Tensor, m: Modality, d_r: usize, params: &TensorMap) -> Result<Tensor> {
    let mut g = Graph::new();
    let pooled = g.constant(tokens.mean_rows());
    let e = retrieval_node(&mut g, m, pooled, d_r);
    Ok(forward(&g, params)?.value(e).clone())
}
