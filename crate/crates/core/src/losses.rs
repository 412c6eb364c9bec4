//! Training objectives. Each loss exists as a plain function over values and as
//! a graph builder (`nodes`) used during training; tests cross-check the two.

use alloc::format;
use alloc::vec::Vec;

use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_lm: f64,
    pub lambda_mc: f64,
    pub lambda_unlikely: f64,
    pub lambda_dig: f64,
    pub lambda_r: f64,
    pub lambda_m: f64,
    pub margin: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lm: 1.0,
            lambda_mc: 1.0,
            lambda_unlikely: 1.0,
            lambda_dig: 1.0,
            lambda_r: 1.0,
            lambda_m: 1.0,
            margin: 0.1,
            tau: 0.07,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_lm", self.lambda_lm),
            ("lambda_mc", self.lambda_mc),
            ("lambda_unlikely", self.lambda_unlikely),
            ("lambda_dig", self.lambda_dig),
            ("lambda_r", self.lambda_r),
            ("lambda_m", self.lambda_m),
            ("margin", self.margin),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("{} must be a nonnegative real, got {}", name, w)));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidInput(format!("epsilon must lie in (0, 1e-3], got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Cross-entropy `-sum y_i log p_i`.
pub fn ce_loss(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() || target.is_empty() {
        return Err(Error::InvalidInput("distribution lengths differ or are empty".into()));
    }
    let total: f64 = predicted.iter().sum();
    if (total - 1.0).abs() > 1e-6 || predicted.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidInput(format!("predicted probabilities sum to {}", total)));
    }
    let mut loss = 0.0;
    for (&y, &p) in target.iter().zip(predicted) {
        if y == 0.0 {
            continue;
        }
        if p == 0.0 {
            return Err(Error::InvalidInput("zero predicted probability on a supported class".into()));
        }
        loss -= y * libm::log(p);
    }
    Ok(loss)
}

/// Penalty on likelihood mass assigned to incorrect candidates:
/// `-(1/(C-1)) sum_{j != correct} log(1 - exp(total_j) + eps)`.
pub fn unlikelihood_loss(totals: &[f64], correct: usize, eps: f64) -> Result<f64> {
    if totals.len() < 2 || correct >= totals.len() {
        return Err(Error::InvalidInput("need at least two candidates and a valid correct index".into()));
    }
    let s: f64 = totals
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != correct)
        .map(|(_, &y)| libm::log(1.0 - libm::exp(y) + eps))
        .sum();
    Ok(-s / (totals.len() - 1) as f64)
}

fn weighted(terms: [(f64, f64); 3]) -> Result<f64> {
    let mut s = 0.0;
    for (w, x) in terms {
        if !(w >= 0.0) {
            return Err(Error::InvalidInput(format!("negative loss weight {}", w)));
        }
        s += w * x;
    }
    Ok(s)
}

pub fn diagnosis_loss(lm: f64, mc: f64, unlikely: f64, w: &LossWeights) -> Result<f64> {
    weighted([(w.lambda_lm, lm), (w.lambda_mc, mc), (w.lambda_unlikely, unlikely)])
}

pub fn prognosis_loss(dig: f64, cox: f64, margin_rank: f64, w: &LossWeights) -> Result<f64> {
    weighted([(w.lambda_dig, dig), (w.lambda_r, cox), (w.lambda_m, margin_rank)])
}

/// Per-sample risk score, time, and event indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalSample {
    pub risk: f64,
    pub time: f64,
    pub event: bool,
}

/// Average negative log partial likelihood with batch-local risk sets
/// (`t_j >= t_i`, including `i`). A batch without events gives 0.
pub fn cox_loss(batch: &[SurvivalSample]) -> f64 {
    let events = batch.iter().filter(|s| s.event).count();
    if events == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for si in batch.iter().filter(|s| s.event) {
        let risk_set = batch.iter().filter(|s| s.time >= si.time);
        let max = risk_set.clone().map(|s| s.risk).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(risk_set.map(|s| libm::exp(s.risk - max)).sum::<f64>());
        total += si.risk - lse;
    }
    -total / events as f64
}

/// Event-anchored comparable pairs `(i, j)` with `event_i` and `t_i < t_j`.
pub fn comparable_pairs(times: &[f64], events: &[bool]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// A scored pair: `y = +1` means `a` should exceed `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair {
    pub a: f64,
    pub b: f64,
    pub y: f64,
}

/// Mean of `max(0, -y (a - b) + margin)`; no pairs gives 0.
pub fn margin_rank_loss(pairs: &[RankPair], margin: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let s: f64 = pairs.iter().map(|p| (-p.y * (p.a - p.b) + margin).max(0.0)).sum();
    s / pairs.len() as f64
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
    row.iter().map(|&x| x - lse).collect()
}

/// Symmetric in-batch contrastive loss over unit-norm rows of `v` and `u`;
/// row `i` of each is the positive for the other.
pub fn contrastive_loss(v: &Tensor, u: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {}", tau)));
    }
    if v.dims() != u.dims() || v.rows() == 0 {
        return Err(Error::InvalidInput("embedding batches must share a nonempty shape".into()));
    }
    let n = v.rows();
    let sim = v.matmul(&u.transpose()).map(|x| x / tau);
    let simt = sim.transpose();
    let mut total = 0.0;
    for i in 0..n {
        total -= log_softmax_row(sim.row_slice(i))[i];
        total -= log_softmax_row(simt.row_slice(i))[i];
    }
    Ok(total / (2 * n) as f64)
}

/// Graph builders for the same objectives.
pub mod nodes {
    use alloc::vec::Vec;

    use crate::diff::{Graph, NodeId, Tensor};

    fn pick(g: &mut Graph, x: NodeId, mask: Tensor) -> NodeId {
        let m = g.constant(mask);
        let p = g.mul(x, m);
        g.sum_all(p)
    }

    /// Cross-entropy of softmax(`logits`) (`1 x C`) against class `target`.
    pub fn ce_from_logits(g: &mut Graph, logits: NodeId, target: usize) -> NodeId {
        let c = g.cols(logits);
        let lp = g.log_softmax(logits);
        let mut m = Tensor::zeros(1, c);
        m.set(0, target, 1.0);
        let s = pick(g, lp, m);
        g.scale(s, -1.0)
    }

    /// Unlikelihood over `1 x C` total log-likelihoods.
    pub fn unlikelihood(g: &mut Graph, totals: NodeId, correct: usize, eps: f64) -> NodeId {
        let c = g.cols(totals);
        let mut sel = Tensor::zeros(c, c - 1);
        let mut col = 0;
        for j in 0..c {
            if j != correct {
                sel.set(j, col, 1.0);
                col += 1;
            }
        }
        let s = g.constant(sel);
        let wrong = g.matmul(totals, s);
        let p = g.exp(wrong);
        let neg = g.scale(p, -1.0);
        let inner = g.add_scalar(neg, 1.0 + eps);
        let l = g.log(inner);
        let m = g.mean_all(l);
        g.scale(m, -1.0)
    }

    /// `sum w_i x_i` over scalar nodes, skipping zero weights.
    pub fn weighted_sum(g: &mut Graph, terms: &[(f64, NodeId)]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &(w, x) in terms {
            if w == 0.0 {
                continue;
            }
            let t = if w == 1.0 { x } else { g.scale(x, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(a, t),
            });
        }
        acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
    }

    /// Cox loss over `n x 1` risks.
    pub fn cox(g: &mut Graph, risks: NodeId, times: &[f64], events: &[bool]) -> NodeId {
        let n = times.len();
        let ev: Vec<usize> = (0..n).filter(|&i| events[i]).collect();
        if ev.is_empty() {
            return g.constant(Tensor::scalar(0.0));
        }
        let ones = g.constant(Tensor::full(ev.len(), 1, 1.0));
        let row = g.transpose(risks);
        let grid = g.matmul(ones, row);
        let mut blocked = Vec::with_capacity(ev.len() * n);
        let mut sel = Tensor::zeros(ev.len(), n);
        for (r, &i) in ev.iter().enumerate() {
            for j in 0..n {
                blocked.push(times[j] < times[i]);
            }
            sel.set(r, i, 1.0);
        }
        let masked = g.masked_fill(grid, blocked);
        let lp = g.log_softmax(masked);
        let s = pick(g, lp, sel);
        g.scale(s, -1.0 / ev.len() as f64)
    }

    /// Margin ranking over `n x 1` risks for index pairs with labels `y`.
    pub fn margin_rank(g: &mut Graph, risks: NodeId, pairs: &[(usize, usize)], ys: &[f64], margin: f64) -> NodeId {
        if pairs.is_empty() {
            return g.constant(Tensor::scalar(0.0));
        }
        let n = g.rows(risks);
        let mut a = Tensor::zeros(pairs.len(), n);
        for (r, (&(i, j), &y)) in pairs.iter().zip(ys).enumerate() {
            a.set(r, i, a.get(r, i) - y);
            a.set(r, j, a.get(r, j) + y);
        }
        let a = g.constant(a);
        let d = g.matmul(a, risks);
        let shifted = g.add_scalar(d, margin);
        let h = g.relu(shifted);
        g.mean_all(h)
    }

    /// Symmetric contrastive loss over `N x r` unit-norm rows.
    pub fn contrastive(g: &mut Graph, v: NodeId, u: NodeId, tau: f64) -> NodeId {
        let n = g.rows(v);
        let ut = g.transpose(u);
        let raw = g.matmul(v, ut);
        let s = g.scale(raw, 1.0 / tau);
        let st = g.transpose(s);
        let a = g.log_softmax(s);
        let b = g.log_softmax(st);
        let pa = pick(g, a, Tensor::identity(n));
        let pb = pick(g, b, Tensor::identity(n));
        let t = g.add(pa, pb);
        g.scale(t, -1.0 / (2 * n) as f64)
    }
}
