//! Multimodal fusion: shared Q/K/V projection, cross-modal K/V mixing with
//! sigmoid ratio weights, one-queries-all local attention, global gating, subset
//! fusion, and assembly of specific + shared blocks into one token sequence.
//!
//! All subsets share one parameter set (`fusion.*`), so a single trained layer
//! serves any modality combination.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::diff::{forward, Axis, Evaluation, Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityBundle, ModalitySet};
use crate::params::ParamSpec;

/// Denominator guard for the mixing ratio.
pub const RATIO_EPS: f64 = 1e-6;

/// Mixing ratios are clipped to this magnitude before the sigmoid so the
/// weights stay representable strictly inside (0, 1) in f64.
pub const RATIO_CLIP: f64 = 36.0;

/// `sigmoid(clip(a / b))` with the sign-safe denominator.
pub(crate) fn ratio_sigmoid(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let ratio = g.safe_div(a, b, RATIO_EPS);
    let clipped = g.clamp(ratio, -RATIO_CLIP, RATIO_CLIP);
    g.sigmoid(clipped)
}

pub const W_Q: &str = "fusion.w_q";
pub const W_K: &str = "fusion.w_k";
pub const W_V: &str = "fusion.w_v";
pub const PROJ_W: &str = "fusion.proj.w";
pub const PROJ_B: &str = "fusion.proj.b";
pub const GATE_W: &str = "fusion.gate.w";
pub const GATE_B: &str = "fusion.gate.b";

pub fn param_specs(d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(W_Q, d, d),
        ParamSpec::weight(W_K, d, d),
        ParamSpec::weight(W_V, d, d),
        ParamSpec::weight(PROJ_W, d, d),
        ParamSpec::bias(PROJ_B, d),
        ParamSpec::weight(GATE_W, 4 * d, d),
        ParamSpec::bias(GATE_B, d),
    ]
}

/// Tag of one block of the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockTag {
    Specific(Modality),
    Shared(ModalitySet),
    SelfFused(Modality),
}

impl fmt::Display for BlockTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockTag::Specific(m) => write!(f, "{}", m.tag()),
            BlockTag::Shared(s) => write!(f, "{}", s.tag()),
            BlockTag::SelfFused(m) => write!(f, "self-{}", m.tag()),
        }
    }
}

/// Block order for a presence set: `(t, ts, s, sm, m, tm, tsm)` for three
/// modalities, `(a, ab, b)` for two, `(i, self-i)` for one.
pub fn block_layout(present: ModalitySet) -> Vec<BlockTag> {
    let mods = present.members();
    match mods.len() {
        1 => vec![BlockTag::Specific(mods[0]), BlockTag::SelfFused(mods[0])],
        2 => vec![
            BlockTag::Specific(mods[0]),
            BlockTag::Shared(present),
            BlockTag::Specific(mods[1]),
        ],
        3 => {
            let (t, s, m) = (Modality::Lab, Modality::Ecg, Modality::Echo);
            vec![
                BlockTag::Specific(t),
                BlockTag::Shared(ModalitySet::of(&[t, s])),
                BlockTag::Specific(s),
                BlockTag::Shared(ModalitySet::of(&[s, m])),
                BlockTag::Specific(m),
                BlockTag::Shared(ModalitySet::of(&[t, m])),
                BlockTag::Shared(ModalitySet::ALL),
            ]
        }
        _ => Vec::new(),
    }
}

/// Token span of each block inside the assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpan {
    pub tag: BlockTag,
    pub tokens: Range<usize>,
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct QkvNodes {
    pub q: [Option<NodeId>; 3],
    pub k: [Option<NodeId>; 3],
    pub v: [Option<NodeId>; 3],
    /// `P(K_i)` and `P(V_i)`.
    pub pk: [Option<NodeId>; 3],
    pub pv: [Option<NodeId>; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct MixNodes {
    pub k: NodeId,
    pub v: NodeId,
    /// Three-modality weight (`lambda_k1 = lambda_v1`), trimodal subsets only.
    pub lambda_tri: Option<NodeId>,
    /// Two-modality weight (`lambda_k2 = lambda_v2`), subsets of size >= 2.
    pub lambda_pair: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalNodes {
    pub out: NodeId,
    pub attn: NodeId,
}

#[derive(Debug, Clone)]
pub struct SubsetNodes {
    pub subset: ModalitySet,
    pub fused: NodeId,
    pub mix: MixNodes,
    pub locals: Vec<(Modality, LocalNodes)>,
    pub gates: Vec<(Modality, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct FusedNodes {
    /// All blocks stacked along the token axis, after ReLU.
    pub z_all: NodeId,
    pub spans: Vec<BlockSpan>,
    pub subsets: Vec<SubsetNodes>,
    pub qkv: QkvNodes,
}

/// Fusion-layer graph builder over the per-modality input nodes.
pub struct FusionBuilder<'g> {
    g: &'g mut Graph,
    inputs: [Option<NodeId>; 3],
    pooled: [Option<NodeId>; 3],
    d: usize,
}

impl<'g> FusionBuilder<'g> {
    /// `inputs[i]` is the `L x d` node of modality `i`, if present.
    pub fn new(g: &'g mut Graph, inputs: [Option<NodeId>; 3]) -> Result<Self> {
        let first = inputs
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or_else(|| Error::InvalidInput("no modality present".into()))?;
        let d = g.cols(first);
        let mut pooled = [None; 3];
        for (slot, inp) in pooled.iter_mut().zip(&inputs) {
            *slot = inp.map(|z| g.mean(z, Axis::Rows));
        }
        Ok(Self { g, inputs, pooled, d })
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.g
    }

    pub fn present(&self) -> ModalitySet {
        let mods: Vec<Modality> = Modality::ALL
            .iter()
            .copied()
            .filter(|m| self.inputs[m.index()].is_some())
            .collect();
        ModalitySet::of(&mods)
    }

    fn project(&mut self, x: NodeId) -> NodeId {
        let d = self.d;
        let w = self.g.param(PROJ_W, d, d);
        let b = self.g.param(PROJ_B, 1, d);
        self.g.affine(x, w, b)
    }

    /// `Q_i = Z_i W_Q`, `K_i = Z_i W_K`, `V_i = Z_i W_V`, plus `P(K_i)`, `P(V_i)`.
    pub fn qkv(&mut self) -> QkvNodes {
        let d = self.d;
        let wq = self.g.param(W_Q, d, d);
        let wk = self.g.param(W_K, d, d);
        let wv = self.g.param(W_V, d, d);
        let mut out = QkvNodes::default();
        for i in 0..3 {
            if let Some(z) = self.inputs[i] {
                out.q[i] = Some(self.g.matmul(z, wq));
                let k = self.g.matmul(z, wk);
                let v = self.g.matmul(z, wv);
                out.k[i] = Some(k);
                out.v[i] = Some(v);
                out.pk[i] = Some(self.project(k));
                out.pv[i] = Some(self.project(v));
            }
        }
        out
    }

    fn ratio_weight(&mut self, ks: &[NodeId], vs: &[NodeId]) -> NodeId {
        let mut sk = ks[0];
        let mut sv = vs[0];
        for (&k, &v) in ks[1..].iter().zip(&vs[1..]) {
            sk = self.g.add(sk, k);
            sv = self.g.add(sv, v);
        }
        ratio_sigmoid(self.g, sk, sv)
    }

    /// Mixed keys/values for `subset` (members in canonical order).
    pub fn mix(&mut self, qkv: &QkvNodes, subset: ModalitySet) -> Result<MixNodes> {
        if subset.is_empty() || !subset.is_subset_of(self.present()) {
            return Err(Error::InvalidInput(format!(
                "subset {} not contained in present modalities {}",
                subset,
                self.present()
            )));
        }
        let idx: Vec<usize> = subset.members().iter().map(|m| m.index()).collect();
        let pk: Vec<NodeId> = idx.iter().map(|&i| qkv.pk[i].unwrap()).collect();
        let pv: Vec<NodeId> = idx.iter().map(|&i| qkv.pv[i].unwrap()).collect();
        Ok(match idx.len() {
            1 => MixNodes {
                k: pk[0],
                v: pv[0],
                lambda_tri: None,
                lambda_pair: None,
            },
            2 => {
                let lam = self.ratio_weight(&pk, &pv);
                let k = self.pair_mix(lam, pk[0], pk[1]);
                let v = self.pair_mix(lam, pv[0], pv[1]);
                MixNodes {
                    k,
                    v,
                    lambda_tri: None,
                    lambda_pair: Some(lam),
                }
            }
            _ => {
                let l1 = self.ratio_weight(&pk, &pv);
                let l2 = self.ratio_weight(&pk[..2], &pv[..2]);
                let k = self.tri_mix(l1, l2, &pk);
                let v = self.tri_mix(l1, l2, &pv);
                MixNodes {
                    k,
                    v,
                    lambda_tri: Some(l1),
                    lambda_pair: Some(l2),
                }
            }
        })
    }

    fn pair_mix(&mut self, lam: NodeId, a: NodeId, b: NodeId) -> NodeId {
        // lam * a + (1 - lam) * b
        let la = self.g.mul(lam, a);
        let neg = self.g.scale(lam, -1.0);
        let rest = self.g.add_scalar(neg, 1.0);
        let rb = self.g.mul(rest, b);
        self.g.add(la, rb)
    }

    fn tri_mix(&mut self, l1: NodeId, l2: NodeId, p: &[NodeId]) -> NodeId {
        // l1 * p0 + l2 * p1 + (1 - l1 - l2) * p2
        let a = self.g.mul(l1, p[0]);
        let b = self.g.mul(l2, p[1]);
        let both = self.g.add(l1, l2);
        let neg = self.g.scale(both, -1.0);
        let rest = self.g.add_scalar(neg, 1.0);
        let c = self.g.mul(rest, p[2]);
        let ab = self.g.add(a, b);
        self.g.add(ab, c)
    }

    /// `softmax(Q_i K_mix^T / sqrt(d)) V_mix`.
    pub fn local(&mut self, q: NodeId, mix: &MixNodes) -> LocalNodes {
        let (out, attn) = crate::layers::scaled_dot(self.g, q, mix.k, mix.v, None);
        LocalNodes { out, attn }
    }

    /// `sigmoid(P_g([mean Z_t, mean Z_s, mean local_i, mean Z_m]))`; slots of
    /// modalities outside `subset` are zero.
    pub fn gate(&mut self, subset: ModalitySet, local: NodeId) -> NodeId {
        let d = self.d;
        let pooled_local = self.g.mean(local, Axis::Rows);
        let slot = |b: &mut Self, m: Modality| -> NodeId {
            match b.pooled[m.index()] {
                Some(p) if subset.contains(m) => p,
                _ => b.g.constant(Tensor::zeros(1, d)),
            }
        };
        let t = slot(self, Modality::Lab);
        let s = slot(self, Modality::Ecg);
        let m = slot(self, Modality::Echo);
        let cat = self.g.concat(&[t, s, pooled_local, m], Axis::Cols);
        let w = self.g.param(GATE_W, 4 * d, d);
        let b = self.g.param(GATE_B, 1, d);
        let logits = self.g.affine(cat, w, b);
        self.g.sigmoid(logits)
    }

    /// `sum_i G_i * Z_i_local` over the members of `subset`.
    pub fn fuse_subset(&mut self, qkv: &QkvNodes, subset: ModalitySet) -> Result<SubsetNodes> {
        let mix = self.mix(qkv, subset)?;
        let mut locals = Vec::new();
        let mut gates = Vec::new();
        let mut acc: Option<NodeId> = None;
        for m in subset.members() {
            let local = self.local(qkv.q[m.index()].unwrap(), &mix);
            let gate = self.gate(subset, local.out);
            let gated = self.g.mul(gate, local.out);
            acc = Some(match acc {
                None => gated,
                Some(a) => self.g.add(a, gated),
            });
            locals.push((m, local));
            gates.push((m, gate));
        }
        Ok(SubsetNodes {
            subset,
            fused: acc.unwrap(),
            mix,
            locals,
            gates,
        })
    }

    /// Specific and shared blocks in canonical order, stacked along tokens and
    /// rectified.
    pub fn assemble(mut self) -> Result<FusedNodes> {
        let present = self.present();
        let qkv = self.qkv();
        let layout = block_layout(present);
        let mut parts = Vec::with_capacity(layout.len());
        let mut spans = Vec::with_capacity(layout.len());
        let mut subsets = Vec::new();
        let mut offset = 0;
        for tag in layout {
            let node = match tag {
                BlockTag::Specific(m) => self.inputs[m.index()].unwrap(),
                BlockTag::Shared(set) => {
                    let s = self.fuse_subset(&qkv, set)?;
                    let n = s.fused;
                    subsets.push(s);
                    n
                }
                BlockTag::SelfFused(m) => {
                    let s = self.fuse_subset(&qkv, ModalitySet::of(&[m]))?;
                    let n = s.fused;
                    subsets.push(s);
                    n
                }
            };
            let len = self.g.rows(node);
            spans.push(BlockSpan {
                tag,
                tokens: offset..offset + len,
            });
            offset += len;
            parts.push(node);
        }
        let stacked = self.g.concat(&parts, Axis::Rows);
        let z_all = self.g.relu(stacked);
        Ok(FusedNodes {
            z_all,
            spans,
            subsets,
            qkv,
        })
    }
}

/// Constant input nodes for every present modality of `bundle`.
pub fn bundle_inputs(g: &mut Graph, bundle: &ModalityBundle) -> [Option<NodeId>; 3] {
    let mut out = [None; 3];
    for m in Modality::ALL {
        out[m.index()] = bundle.get(m).map(|t| g.constant(t.clone()));
    }
    out
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

/// Q/K/V for each present modality.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvSet {
    pub q: [Option<Tensor>; 3],
    pub k: [Option<Tensor>; 3],
    pub v: [Option<Tensor>; 3],
}

impl QkvSet {
    pub fn q(&self, m: Modality) -> Option<&Tensor> {
        self.q[m.index()].as_ref()
    }
    pub fn k(&self, m: Modality) -> Option<&Tensor> {
        self.k[m.index()].as_ref()
    }
    pub fn v(&self, m: Modality) -> Option<&Tensor> {
        self.v[m.index()].as_ref()
    }
    fn present(&self) -> ModalitySet {
        ModalitySet::of(
            &Modality::ALL
                .iter()
                .copied()
                .filter(|m| self.q[m.index()].is_some())
                .collect::<Vec<_>>(),
        )
    }
}

/// Mixed keys and values with their mixing weights. Weights a subset does not
/// use (the three-way pair for two modalities, both for one) are ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedKV {
    pub k_mix: Tensor,
    pub v_mix: Tensor,
    pub lambda_k1: Tensor,
    pub lambda_v1: Tensor,
    pub lambda_k2: Tensor,
    pub lambda_v2: Tensor,
}

/// Assembled blocks with their token spans.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBlocks {
    pub blocks: Vec<(BlockTag, Tensor)>,
    pub spans: Vec<BlockSpan>,
}

impl FusedBlocks {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tags(&self) -> Vec<BlockTag> {
        self.blocks.iter().map(|(t, _)| *t).collect()
    }

    /// All blocks stacked along tokens.
    pub fn z_all(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.blocks.iter().map(|(_, t)| t).collect();
        Tensor::vstack(&refs)
    }
}

fn run(g: &Graph, params: &TensorMap) -> Result<Evaluation> {
    forward(g, params)
}

pub fn qkv_project(bundle: &ModalityBundle, params: &TensorMap) -> Result<QkvSet> {
    let mut g = Graph::new();
    let inputs = bundle_inputs(&mut g, bundle);
    let mut b = FusionBuilder::new(&mut g, inputs)?;
    let nodes = b.qkv();
    let ev = run(&g, params)?;
    let pick = |n: [Option<NodeId>; 3]| n.map(|x| x.map(|id| ev.value(id).clone()));
    Ok(QkvSet {
        q: pick(nodes.q),
        k: pick(nodes.k),
        v: pick(nodes.v),
    })
}

/// Builds a graph whose inputs are the given Q/K/V tensors (as constants).
fn qkv_graph(g: &mut Graph, qkv: &QkvSet) -> Result<(QkvNodes, [Option<NodeId>; 3])> {
    let d = qkv.q.iter().flatten().next().map(|t| t.cols()).ok_or_else(|| {
        Error::InvalidInput("empty Q/K/V set".into())
    })?;
    let mut nodes = QkvNodes::default();
    let mut inputs = [None; 3];
    let w = g.param(PROJ_W, d, d);
    let b = g.param(PROJ_B, 1, d);
    for i in 0..3 {
        if let (Some(q), Some(k), Some(v)) = (&qkv.q[i], &qkv.k[i], &qkv.v[i]) {
            let qn = g.constant(q.clone());
            let kn = g.constant(k.clone());
            let vn = g.constant(v.clone());
            nodes.q[i] = Some(qn);
            nodes.k[i] = Some(kn);
            nodes.v[i] = Some(vn);
            nodes.pk[i] = Some(g.affine(kn, w, b));
            nodes.pv[i] = Some(g.affine(vn, w, b));
            inputs[i] = Some(qn);
        }
    }
    Ok((nodes, inputs))
}

pub fn mix_kv(qkv: &QkvSet, subset: ModalitySet, params: &TensorMap) -> Result<MixedKV> {
    if subset.is_empty() || !subset.is_subset_of(qkv.present()) {
        return Err(Error::InvalidInput(format!("subset {} not present", subset)));
    }
    let mut g = Graph::new();
    let (nodes, inputs) = qkv_graph(&mut g, qkv)?;
    let mut b = FusionBuilder::new(&mut g, inputs)?;
    let mix = b.mix(&nodes, subset)?;
    let ev = run(&g, params)?;
    let k_mix = ev.value(mix.k).clone();
    let ones = Tensor::full(k_mix.rows(), k_mix.cols(), 1.0);
    let l1 = mix.lambda_tri.map_or(ones.clone(), |n| ev.value(n).clone());
    let l2 = mix.lambda_pair.map_or(ones, |n| ev.value(n).clone());
    Ok(MixedKV {
        k_mix,
        v_mix: ev.value(mix.v).clone(),
        lambda_k1: l1.clone(),
        lambda_v1: l1,
        lambda_k2: l2.clone(),
        lambda_v2: l2,
    })
}

/// Local attention of `query` over the mixed keys/values. Returns the fused
/// rows and the attention matrix.
pub fn local_fuse(query: Modality, qkv: &QkvSet, mixed: &MixedKV) -> Result<(Tensor, Tensor)> {
    let q = qkv.q(query).ok_or(Error::MissingModality(query.name()))?;
    let mut g = Graph::new();
    let qn = g.constant(q.clone());
    let kn = g.constant(mixed.k_mix.clone());
    let vn = g.constant(mixed.v_mix.clone());
    let (out, attn) = crate::layers::scaled_dot(&mut g, qn, kn, vn, None);
    let ev = run(&g, &TensorMap::new())?;
    Ok((ev.value(out).clone(), ev.value(attn).clone()))
}

/// Gate of `query`'s local features within `subset`.
pub fn global_gate(
    bundle: &ModalityBundle,
    subset: ModalitySet,
    local: &Tensor,
    params: &TensorMap,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let inputs = bundle_inputs(&mut g, bundle);
    let ln = g.constant(local.clone());
    let mut b = FusionBuilder::new(&mut g, inputs)?;
    let gate = b.gate(subset, ln);
    Ok(run(&g, params)?.value(gate).clone())
}

pub fn fuse_subset(bundle: &ModalityBundle, subset: ModalitySet, params: &TensorMap) -> Result<Tensor> {
    let mut g = Graph::new();
    let inputs = bundle_inputs(&mut g, bundle);
    let mut b = FusionBuilder::new(&mut g, inputs)?;
    let qkv = b.qkv();
    let s = b.fuse_subset(&qkv, subset)?;
    Ok(run(&g, params)?.value(s.fused).clone())
}

pub fn assemble_all(bundle: &ModalityBundle, params: &TensorMap) -> Result<FusedBlocks> {
    let mut g = Graph::new();
    let inputs = bundle_inputs(&mut g, bundle);
    let fused = FusionBuilder::new(&mut g, inputs)?.assemble()?;
    let ev = run(&g, params)?;
    let z = ev.value(fused.z_all);
    let blocks = fused
        .spans
        .iter()
        .map(|s| {
            let d = z.cols();
            let data = z.data()[s.tokens.start * d..s.tokens.end * d].to_vec();
            (s.tag, Tensor::matrix(s.tokens.len(), d, data))
        })
        .collect();
    Ok(FusedBlocks {
        blocks,
        spans: fused.spans,
    })
}

/// Human-readable list of block tags, e.g. `t,ts,s`.
pub fn layout_string(tags: &[BlockTag]) -> String {
    let parts: Vec<String> = tags.iter().map(|t| format!("{}", t)).collect();
    parts.join(",")
}
