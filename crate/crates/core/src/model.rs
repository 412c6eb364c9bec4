//! The full network for one task: fusion, prompt guidance and the response
//! heads, built into one graph per batch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{LabelSchema, LabeledRecord};
use crate::diff::{forward, Axis, Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::fusion::{self, BlockSpan, BlockTag, FusedNodes, FusionBuilder};
use crate::guidance::{self, GuidanceConfig, GuidedNodes, Mode, Sstc};
use crate::layers::head_mean;
use crate::losses::{self, nodes as loss_nodes, LossWeights};
use crate::modality::{Modality, ModalityBundle, ModalitySet};
use crate::params::{initialize, ParamSpec};
use crate::response::{self, CandidateScore, DecoderConfig};
use crate::rng::{Stream, STREAM_INIT};
use crate::train::RunConfig;
use crate::vocab::Vocabulary;

/// Records evaluated per graph in inference.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct Model {
    pub task: LabelSchema,
    pub d: usize,
    pub tokens: usize,
    pub d_r: usize,
    pub modalities: ModalitySet,
    pub vocab: Vocabulary,
    pub guidance: GuidanceConfig,
    /// Prompt sequence; absent for retrieval, which reads modality features only.
    pub sstc: Option<Sstc>,
    pub candidates: Vec<Vec<usize>>,
    pub decoder: DecoderConfig,
}

/// Per-record graph nodes of the guided sequence.
#[derive(Debug, Clone)]
pub struct SampleNodes {
    pub fused: FusedNodes,
    pub guided: GuidedNodes,
}

/// Extra training labels not stored on records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossContext {
    pub weights: LossWeights,
    pub mode: Mode,
    /// Prognosis: events at or before this time count as high risk.
    pub risk_threshold: f64,
    pub modality_dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub scores: Vec<CandidateScore>,
    pub predicted: usize,
    /// Softmax of the mean log-likelihoods.
    pub probs: Vec<f64>,
}

/// Mean attention mass per block for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub id: String,
    pub predicted: usize,
    pub blocks: Vec<BlockTag>,
    pub guidance: Vec<f64>,
    pub decoder: Vec<f64>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| libm::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Sum attention mass over the keys of each block (keys past the fused
/// sequence are padding and ignored).
fn block_mass(mass: &[f64], spans: &[BlockSpan]) -> Vec<f64> {
    spans.iter().map(|s| mass[s.tokens.clone()].iter().sum()).collect()
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let vocab = Vocabulary::build(core::iter::once(cfg.prompt.as_str()).chain(cfg.candidates.iter().map(|s| s.as_str())));
        let guidance = GuidanceConfig {
            d: cfg.d,
            heads: cfg.heads,
            n_learned: cfg.n_l,
            insert_pos: cfg.insert_pos,
            p_drop: cfg.p_drop,
        };
        let (sstc, candidates) = if cfg.task == LabelSchema::Retrieval {
            (None, Vec::new())
        } else {
            let mut prompts = BTreeMap::new();
            prompts.insert(String::from(cfg.task.name()), cfg.prompt.clone());
            let sstc = guidance::build_sstc(cfg.task.name(), &prompts, &vocab, cfg.n_l, cfg.insert_pos)?;
            let candidates = cfg
                .candidates
                .iter()
                .map(|c| vocab.tokenize(c))
                .collect::<Result<Vec<_>>>()?;
            if candidates.len() < 2 || candidates.iter().any(|c| c.is_empty()) {
                return Err(Error::InvalidInput("need at least two nonempty candidate answers".into()));
            }
            (Some(sstc), candidates)
        };
        let decoder = DecoderConfig {
            d: cfg.d,
            heads: cfg.heads,
            vocab_len: vocab.len(),
            max_len: candidates.iter().map(|c| c.len()).max().unwrap_or(1),
            start_id: vocab.start(),
        };
        Ok(Self {
            task: cfg.task,
            d: cfg.d,
            tokens: cfg.tokens,
            d_r: cfg.d_r,
            modalities: cfg.modalities,
            vocab,
            guidance,
            sstc,
            candidates,
            decoder,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        match self.task {
            LabelSchema::Retrieval => v.extend(response::retrieval_specs(self.d, self.d_r)),
            task => {
                let sstc = self.sstc.as_ref().unwrap();
                v.extend(fusion::param_specs(self.d));
                v.extend(guidance::param_specs(&self.guidance, self.vocab.len(), sstc.len()));
                v.extend(response::decoder_specs(&self.decoder));
                if task == LabelSchema::Prognosis {
                    v.extend(response::risk_specs(self.d));
                }
            }
        }
        v
    }

    pub fn init_params(&self, seed: u64) -> TensorMap {
        initialize(&self.param_specs(), &mut Stream::new(seed, STREAM_INIT))
    }

    /// Check a record's shape, labels and modalities against the model.
    pub fn check_record(&self, r: &LabeledRecord) -> Result<()> {
        r.validate(self.task)?;
        let [l, d] = r.bundle.dims();
        if (l, d) != (self.tokens, self.d) {
            return Err(Error::SchemaMismatch {
                task: self.task.name(),
                detail: format!("record {} is {}x{}, model expects {}x{}", r.id, l, d, self.tokens, self.d),
            });
        }
        let have = r.bundle.presence();
        let ok = match self.task {
            LabelSchema::Retrieval => self.modalities.is_subset_of(have),
            _ => !(have.bits() & self.modalities.bits() == 0),
        };
        if !ok {
            return Err(Error::SchemaMismatch {
                task: self.task.name(),
                detail: format!("record {} carries modalities {}, model uses {}", r.id, have, self.modalities),
            });
        }
        if let (LabelSchema::Diagnosis, Some(c)) = (self.task, r.class) {
            if c as usize >= self.candidates.len() {
                return Err(Error::SchemaMismatch {
                    task: self.task.name(),
                    detail: format!("class {} has no candidate answer", c),
                });
            }
        }
        Ok(())
    }

    fn restrict(&self, bundle: &ModalityBundle, subset: ModalitySet) -> Result<ModalityBundle> {
        bundle.restrict(ModalitySet::from_bits(subset.bits() & self.modalities.bits()).unwrap())
    }

    /// Encoded prompt `Z_C`, shared by all records of a graph.
    pub fn prompt_node(&self, g: &mut Graph) -> NodeId {
        let sstc = self.sstc.as_ref().expect("prompt of a guided task");
        guidance::encode_nodes(g, sstc, &self.guidance, self.vocab.len()).z_c
    }

    /// Fused and guided sequence of one record.
    pub fn sample_nodes(&self, g: &mut Graph, bundle: &ModalityBundle, z_c: NodeId, residual_scale: f64) -> Result<SampleNodes> {
        let inputs = fusion::bundle_inputs(g, bundle);
        let fused = FusionBuilder::new(g, inputs)?.assemble()?;
        let guided = guidance::guide_nodes(g, fused.z_all, z_c, residual_scale);
        Ok(SampleNodes { fused, guided })
    }

    /// `1 x C` rows of total and mean candidate log-likelihoods.
    fn candidate_nodes(&self, g: &mut Graph, memory: NodeId) -> Result<(NodeId, NodeId, Vec<response::ScoreNodes>)> {
        let scores = self
            .candidates
            .iter()
            .map(|c| response::score_nodes(g, memory, c, &self.decoder))
            .collect::<Result<Vec<_>>>()?;
        let totals: Vec<NodeId> = scores.iter().map(|s| s.total).collect();
        let means: Vec<NodeId> = scores.iter().map(|s| s.mean).collect();
        let t = g.concat(&totals, Axis::Cols);
        let m = g.concat(&means, Axis::Cols);
        Ok((t, m, scores))
    }

    /// Classification objective over candidates for the correct index `y`.
    fn classification_loss(&self, g: &mut Graph, totals: NodeId, means: NodeId, y: usize, w: &LossWeights) -> NodeId {
        let picked = g.slice(means, Axis::Cols, y, 1);
        let lm = g.scale(picked, -1.0);
        let mc = loss_nodes::ce_from_logits(g, means, y);
        let ul = loss_nodes::unlikelihood(g, totals, y, w.epsilon);
        loss_nodes::weighted_sum(g, &[(w.lambda_lm, lm), (w.lambda_mc, mc), (w.lambda_unlikely, ul)])
    }

    fn training_bundle(&self, r: &LabeledRecord, ctx: &LossContext, rng: &mut Stream) -> Result<ModalityBundle> {
        let have = ModalitySet::from_bits(r.bundle.presence().bits() & self.modalities.bits()).unwrap();
        let mut keep = have;
        if ctx.mode == Mode::Train && ctx.modality_dropout > 0.0 && have.len() > 1 && rng.bernoulli(ctx.modality_dropout) {
            let options: Vec<ModalitySet> = ModalitySet::nonempty_subsets()
                .into_iter()
                .filter(|s| s.is_subset_of(have) && *s != have)
                .collect();
            keep = options[rng.below(options.len())];
        }
        r.bundle.restrict(keep)
    }

    /// Scalar mean loss of one batch. `rng` drives stochastic depth and
    /// modality dropout in training mode.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[&LabeledRecord], ctx: &LossContext, rng: &mut Stream) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let w = &ctx.weights;
        if self.task == LabelSchema::Retrieval {
            return self.retrieval_loss(g, batch, w.tau);
        }
        let z_c = self.prompt_node(g);
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut risks = Vec::new();
        for r in batch {
            let bundle = self.training_bundle(r, ctx, rng)?;
            let scale = guidance::residual_scale(ctx.mode, self.guidance.p_drop, rng);
            let s = self.sample_nodes(g, &bundle, z_c, scale)?;
            let memory = s.guided.z_all_c;
            let (totals, means, _) = self.candidate_nodes(g, memory)?;
            let y = match self.task {
                LabelSchema::Prognosis => {
                    let sv = r.survival.unwrap();
                    risks.push(response::risk_node(g, memory));
                    (sv.event && sv.time <= ctx.risk_threshold) as usize
                }
                _ => r.class.unwrap() as usize,
            };
            per_sample.push(self.classification_loss(g, totals, means, y, w));
        }
        let terms: Vec<(f64, NodeId)> = per_sample.iter().map(|&n| (1.0, n)).collect();
        let sum = loss_nodes::weighted_sum(g, &terms);
        let cls = g.scale(sum, 1.0 / batch.len() as f64);
        if self.task != LabelSchema::Prognosis {
            return Ok(cls);
        }
        let risk = g.concat(&risks, Axis::Rows);
        let times: Vec<f64> = batch.iter().map(|r| r.survival.unwrap().time).collect();
        let events: Vec<bool> = batch.iter().map(|r| r.survival.unwrap().event).collect();
        let cox = loss_nodes::cox(g, risk, &times, &events);
        let pairs = losses::comparable_pairs(&times, &events);
        let ys = vec![1.0; pairs.len()];
        let rank = loss_nodes::margin_rank(g, risk, &pairs, &ys, w.margin);
        Ok(loss_nodes::weighted_sum(g, &[(w.lambda_dig, cls), (w.lambda_r, cox), (w.lambda_m, rank)]))
    }

    fn pooled(&self, batch: &[&LabeledRecord], m: Modality) -> Result<Tensor> {
        let rows = batch
            .iter()
            .map(|r| r.bundle.require(m).map(|t| t.mean_rows()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::vstack(&refs))
    }

    /// Contrastive loss summed over every pair of the model's modalities.
    fn retrieval_loss(&self, g: &mut Graph, batch: &[&LabeledRecord], tau: f64) -> Result<NodeId> {
        let mods = self.modalities.members();
        let mut emb = Vec::with_capacity(mods.len());
        for &m in &mods {
            let p = g.constant(self.pooled(batch, m)?);
            emb.push(response::retrieval_node(g, m, p, self.d_r));
        }
        let mut terms = Vec::new();
        for a in 0..mods.len() {
            for b in a + 1..mods.len() {
                terms.push((1.0, loss_nodes::contrastive(g, emb[a], emb[b], tau)));
            }
        }
        Ok(loss_nodes::weighted_sum(g, &terms))
    }

    /// Candidate scores for each record in evaluation mode, optionally
    /// restricted to `subset` of the model's modalities.
    pub fn diagnose(&self, params: &TensorMap, records: &[LabeledRecord], subset: ModalitySet) -> Result<Vec<Diagnosis>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let z_c = self.prompt_node(&mut g);
            let mut nodes = Vec::with_capacity(chunk.len());
            for r in chunk {
                let b = self.restrict(&r.bundle, subset)?;
                let s = self.sample_nodes(&mut g, &b, z_c, 1.0)?;
                let (t, m, _) = self.candidate_nodes(&mut g, s.guided.z_all_c)?;
                nodes.push((t, m));
            }
            let ev = forward(&g, params)?;
            for (t, m) in nodes {
                let totals = ev.value(t).data();
                let means = ev.value(m).data();
                let scores: Vec<CandidateScore> = totals
                    .iter()
                    .zip(means)
                    .map(|(&total_loglik, &mean_loglik)| CandidateScore { total_loglik, mean_loglik })
                    .collect();
                let predicted = response::argmax_candidate(&scores).unwrap();
                out.push(Diagnosis {
                    probs: softmax(means),
                    scores,
                    predicted,
                });
            }
        }
        Ok(out)
    }

    /// Risk scores of a prognosis model in evaluation mode.
    pub fn risks(&self, params: &TensorMap, records: &[LabeledRecord], subset: ModalitySet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let z_c = self.prompt_node(&mut g);
            let mut nodes = Vec::with_capacity(chunk.len());
            for r in chunk {
                let b = self.restrict(&r.bundle, subset)?;
                let s = self.sample_nodes(&mut g, &b, z_c, 1.0)?;
                nodes.push(response::risk_node(&mut g, s.guided.z_all_c));
            }
            let ev = forward(&g, params)?;
            out.extend(nodes.iter().map(|&n| ev.value(n).item()));
        }
        Ok(out)
    }

    /// `N x d_r` unit-norm retrieval embeddings of modality `m`.
    pub fn embeddings(&self, params: &TensorMap, records: &[LabeledRecord], m: Modality) -> Result<Tensor> {
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        let mut g = Graph::new();
        let p = g.constant(self.pooled(&refs, m)?);
        let e = response::retrieval_node(&mut g, m, p, self.d_r);
        Ok(forward(&g, params)?.value(e).clone())
    }

    /// Per-block attention mass from the guidance stage and from the decoder
    /// cross-attention of the predicted candidate, averaged over heads and
    /// query positions.
    pub fn attention(&self, params: &TensorMap, record: &LabeledRecord) -> Result<AttentionRow> {
        let mut g = Graph::new();
        let z_c = self.prompt_node(&mut g);
        let b = self.restrict(&record.bundle, ModalitySet::ALL)?;
        let s = self.sample_nodes(&mut g, &b, z_c, 1.0)?;
        let (_, m, scores) = self.candidate_nodes(&mut g, s.guided.z_all_c)?;
        let ev = forward(&g, params)?;
        let means = ev.value(m).data();
        let predicted = (0..means.len()).fold(0, |best, i| if means[i] > means[best] { i } else { best });

        let spans = &s.fused.spans;
        let guide = ev.value(s.guided.attn).mean_rows();
        let cross = head_mean(&ev, &scores[predicted].cross).mean_rows();
        Ok(AttentionRow {
            id: record.id.clone(),
            predicted,
            blocks: spans.iter().map(|s| s.tag).collect(),
            guidance: block_mass(guide.data(), spans),
            decoder: block_mass(cross.data(), spans),
        })
    }
}
