//! Optimization loop, evaluation and attention export for the three tasks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{LabelSchema, LabeledRecord};
use crate::diff::{backward, forward, Graph, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::fusion::BlockTag;
use crate::guidance::Mode;
use crate::losses::LossWeights;
use crate::metrics::{self, KmCurve, MetricReport};
use crate::modality::{Modality, ModalitySet};
use crate::model::{AttentionRow, LossContext, Model};
use crate::rng::{Stream, STREAM_DROPOUT, STREAM_SHUFFLE};

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: LabelSchema,
    pub d: usize,
    pub tokens: usize,
    pub d_r: usize,
    pub n_l: usize,
    pub insert_pos: usize,
    pub heads: usize,
    pub p_drop: f64,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Validations without improvement before halving the learning rate.
    pub lr_patience: usize,
    pub seed: u64,
    pub prompt: String,
    pub candidates: Vec<String>,
    /// Modalities the model reads; others are dropped from every record.
    pub modalities: ModalitySet,
    /// Training-time probability of hiding a random proper subset of modalities.
    pub modality_dropout: f64,
    /// Retrieval evaluation gallery size.
    pub gallery: usize,
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
}

impl RunConfig {
    pub fn for_task(task: LabelSchema) -> Self {
        let (prompt, candidates): (&str, &[&str]) = match task {
            LabelSchema::Diagnosis => ("does the patient have heart failure", &["no", "yes"]),
            LabelSchema::Prognosis => ("will the patient develop heart failure", &["low risk", "high risk"]),
            LabelSchema::Retrieval => ("", &[]),
        };
        Self {
            task,
            d: 16,
            tokens: 4,
            d_r: 128,
            n_l: 8,
            insert_pos: 0,
            heads: 4,
            p_drop: 0.1,
            weights: LossWeights::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            grad_clip: 10.0,
            batch_size: 16,
            max_steps: 300,
            validate_every: 10,
            patience: 20,
            lr_patience: 10,
            seed: 0,
            prompt: prompt.into(),
            candidates: candidates.iter().map(|s| String::from(*s)).collect(),
            modalities: ModalitySet::ALL,
            modality_dropout: 0.0,
            gallery: 16,
            bootstrap: metrics::DEFAULT_RESAMPLES,
            bootstrap_seed: metrics::DEFAULT_BOOTSTRAP_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(m));
        let positive = [
            ("d", self.d),
            ("tokens", self.tokens),
            ("d_r", self.d_r),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("validate_every", self.validate_every),
            ("gallery", self.gallery),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{} must be positive", name));
            }
        }
        if self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.insert_pos > self.n_l {
            return fail(format!("insert_pos {} exceeds n_l {}", self.insert_pos, self.n_l));
        }
        if !(0.0..1.0).contains(&self.p_drop) || !(0.0..1.0).contains(&self.modality_dropout) {
            return fail("drop probabilities must lie in [0, 1)".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("optimizer settings out of range".into());
        }
        if !(self.eps_opt > 0.0) || !(self.grad_clip > 0.0) {
            return fail("eps_opt and grad_clip must be positive".into());
        }
        if self.modalities.is_empty() {
            return fail("no modalities selected".into());
        }
        if self.task == LabelSchema::Retrieval && self.modalities.len() < 2 {
            return fail("retrieval needs at least two modalities".into());
        }
        if self.bootstrap < 100 {
            return fail(format!("{} bootstrap resamples, need at least 100", self.bootstrap));
        }
        self.weights.validate()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: TensorMap,
    v: TensorMap,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let v = self.v.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data());
            for ((x, (mi, vi)), &gi) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Scale all gradients so their joint Euclidean norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut TensorMap, max: f64) -> f64 {
    let norm = libm::sqrt(grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>());
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Trained parameters with the configuration that produced them. Parameters
/// are held at 32-bit precision so a saved checkpoint reloads exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: TensorMap,
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: &TensorMap) -> Self {
        Self {
            config,
            params: params.iter().map(|(k, v)| (k.clone(), v.round_f32())).collect(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
    pub best_step: Option<usize>,
    pub best_metric: Option<f64>,
    pub stopped_early: bool,
}

/// Median event time among observed events; events at or before it form the
/// high-risk class of the prognosis classification term.
pub fn risk_threshold(records: &[LabeledRecord]) -> f64 {
    let mut t: Vec<f64> = records
        .iter()
        .filter_map(|r| r.survival)
        .filter(|s| s.event)
        .map(|s| s.time)
        .collect();
    if t.is_empty() {
        return 0.0;
    }
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = t.len();
    if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    }
}

fn check_records(model: &Model, records: &[LabeledRecord]) -> Result<()> {
    records.iter().try_for_each(|r| model.check_record(r))
}

/// Mean retrieval metrics over consecutive galleries of `size` records for
/// query modality `a` against gallery modality `b`: `(lrap, recall@1, recall@2)`.
fn retrieval_scores(ea: &Tensor, eb: &Tensor, size: usize) -> Result<(f64, f64, f64)> {
    let n = ea.rows();
    let (mut lrap, mut r1, mut r2, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut start = 0;
    while start < n {
        let len = size.min(n - start);
        if len < 2 && count > 0 {
            break;
        }
        let rows = |t: &Tensor| {
            let r: Vec<&[f64]> = (start..start + len).map(|i| t.row_slice(i)).collect();
            Tensor::from_rows(&r)
        };
        let sim = rows(ea).matmul(&rows(eb).transpose());
        let rel: Vec<Vec<usize>> = (0..len).map(|i| vec![i]).collect();
        lrap += metrics::lrap(&sim, &rel)? * len as f64;
        r1 += metrics::recall_at_k(&sim, &rel, 1)? * len as f64;
        r2 += metrics::recall_at_k(&sim, &rel, 2.min(len))? * len as f64;
        count += len;
        start += len;
    }
    let c = count as f64;
    Ok((lrap / c, r1 / c, r2 / c))
}

/// Single number tracked for early stopping: AUC, C-index or mean LRAP.
fn validation_metric(model: &Model, cfg: &RunConfig, params: &TensorMap, val: &[LabeledRecord]) -> Result<f64> {
    match cfg.task {
        LabelSchema::Diagnosis => {
            let out = model.diagnose(params, val, ModalitySet::ALL)?;
            let scores: Vec<f64> = out.iter().map(|d| d.probs[1]).collect();
            let labels: Vec<bool> = val.iter().map(|r| r.class == Some(1)).collect();
            match metrics::auc(&scores, &labels) {
                Ok(a) => Ok(a),
                Err(Error::Undefined(_)) => {
                    let pred: Vec<usize> = out.iter().map(|d| d.predicted).collect();
                    let truth: Vec<usize> = val.iter().map(|r| r.class.unwrap() as usize).collect();
                    metrics::accuracy(&pred, &truth)
                }
                Err(e) => Err(e),
            }
        }
        LabelSchema::Prognosis => {
            let risks = model.risks(params, val, ModalitySet::ALL)?;
            let (t, e) = survival_columns(val);
            match metrics::c_index(&risks, &t, &e) {
                Err(Error::Undefined(_)) => Ok(0.5),
                other => other,
            }
        }
        LabelSchema::Retrieval => {
            let mods = cfg.modalities.members();
            let emb = mods
                .iter()
                .map(|&m| model.embeddings(params, val, m))
                .collect::<Result<Vec<_>>>()?;
            let mut total = 0.0;
            let mut n = 0;
            for a in 0..mods.len() {
                for b in 0..mods.len() {
                    if a != b {
                        total += retrieval_scores(&emb[a], &emb[b], cfg.gallery)?.0;
                        n += 1;
                    }
                }
            }
            Ok(total / n as f64)
        }
    }
}

fn survival_columns(records: &[LabeledRecord]) -> (Vec<f64>, Vec<bool>) {
    records
        .iter()
        .map(|r| {
            let s = r.survival.unwrap();
            (s.time, s.event)
        })
        .unzip()
}

pub fn train_task(cfg: &RunConfig, train: &[LabeledRecord], val: &[LabeledRecord]) -> Result<TrainOutcome> {
    train_task_with(cfg, train, val, |_, _, _| false)
}

/// Train with an observer called after every step with the model, the step's
/// history entry and the current parameters; returning `true` stops training.
pub fn train_task_with<F>(cfg: &RunConfig, train: &[LabeledRecord], val: &[LabeledRecord], observe: F) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &HistoryEntry, &TensorMap) -> bool,
{
    train_task_from(cfg, None, train, val, observe)
}

/// Train starting from `start` (a previous checkpoint's parameters) instead
/// of a fresh initialization. Optimizer moments start at zero.
pub fn train_task_from<F>(
    cfg: &RunConfig,
    start: Option<&TensorMap>,
    train: &[LabeledRecord],
    val: &[LabeledRecord],
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &HistoryEntry, &TensorMap) -> bool,
{
    cfg.validate()?;
    let model = Model::new(cfg)?;
    check_records(&model, train)?;
    check_records(&model, val)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let init = model.init_params(cfg.seed);
    if let Some(start) = start {
        let same = start.len() == init.len()
            && init.iter().all(|(k, v)| start.get(k).map_or(false, |s| s.dims() == v.dims()));
        if !same {
            return Err(Error::InvalidInput("starting parameters do not match the model".into()));
        }
    }
    let mut params: TensorMap = start
        .unwrap_or(&init)
        .iter()
        .map(|(k, v)| (k.clone(), v.round_f32()))
        .collect();
    let ctx = LossContext {
        weights: cfg.weights,
        mode: Mode::Train,
        risk_threshold: risk_threshold(train),
        modality_dropout: cfg.modality_dropout,
    };
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_opt);
    let mut shuffle = Stream::new(cfg.seed, STREAM_SHUFFLE);
    let mut coins = Stream::new(cfg.seed, STREAM_DROPOUT);

    let bs = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TensorMap)> = None;
    let (mut since_best, mut since_lr) = (0, 0);
    let mut stopped_early = false;

    for step in 1..=cfg.max_steps {
        if cursor + bs > train.len() {
            shuffle.shuffle(&mut order);
            cursor = 0;
        }
        let batch: Vec<&LabeledRecord> = order[cursor..cursor + bs].iter().map(|&i| &train[i]).collect();
        cursor += bs;

        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &batch, &ctx, &mut coins)?;
        let ev = forward(&g, &params).map_err(|e| match e {
            Error::NonFinite { .. } | Error::DivisionByZero { .. } => Error::NonFiniteLoss(step),
            e => e,
        })?;
        let value = ev.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grads = backward(&g, &ev, loss)?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.step(&mut params, &grads);

        let mut entry = HistoryEntry {
            step,
            loss: value,
            val_metric: None,
            lr: adam.lr,
        };
        if !val.is_empty() && step % cfg.validate_every == 0 {
            let snapshot = Checkpoint::new(cfg.clone(), &params).params;
            let metric = validation_metric(&model, cfg, &snapshot, val)?;
            entry.val_metric = Some(metric);
            if best.as_ref().map_or(true, |b| metric > b.0) {
                best = Some((metric, step, snapshot));
                since_best = 0;
                since_lr = 0;
            } else {
                since_best += 1;
                since_lr += 1;
                if since_lr >= cfg.lr_patience {
                    adam.lr *= 0.5;
                    since_lr = 0;
                }
                if since_best >= cfg.patience {
                    stopped_early = true;
                }
            }
        }
        let stop = observe(&model, &entry, &params);
        history.push(entry);
        if stop || stopped_early {
            break;
        }
    }
    let (best_metric, best_step, checkpoint) = match best {
        Some((m, s, p)) => (Some(m), Some(s), Checkpoint { config: cfg.clone(), params: p }),
        None => (None, None, Checkpoint::new(cfg.clone(), &params)),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_step,
        best_metric,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Modalities visible at evaluation (intersected with the model's).
    pub subset: ModalitySet,
    pub resamples: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            subset: ModalitySet::ALL,
            resamples: cfg.bootstrap,
            seed: cfg.bootstrap_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: LabelSchema,
    pub metrics: Vec<MetricReport>,
    /// Prognosis: curves of the low- and high-risk halves (split at the median risk).
    pub km: Vec<(String, KmCurve)>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

fn plain(name: String, point: f64, n: usize) -> MetricReport {
    MetricReport {
        name,
        point,
        ci: None,
        n,
        resamples: 0,
        seed: 0,
    }
}

/// Survival of `curve` at the last time both groups are still followed.
fn km_gap(low: &KmCurve, high: &KmCurve, low_end: f64, high_end: f64) -> f64 {
    let t = low_end.min(high_end);
    low.survival_at(t) - high.survival_at(t)
}

pub fn evaluate_task(ckpt: &Checkpoint, records: &[LabeledRecord], opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = &ckpt.config;
    let model = ckpt.model()?;
    check_records(&model, records)?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    let params = &ckpt.params;
    let n = records.len();
    let mut report = EvalReport {
        task: cfg.task,
        metrics: Vec::new(),
        km: Vec::new(),
    };
    match cfg.task {
        LabelSchema::Diagnosis => {
            let out = model.diagnose(params, records, opts.subset)?;
            let pred: Vec<usize> = out.iter().map(|d| d.predicted).collect();
            let truth: Vec<usize> = records.iter().map(|r| r.class.unwrap() as usize).collect();
            let scores: Vec<f64> = out.iter().map(|d| d.probs[1]).collect();
            let labels: Vec<bool> = truth.iter().map(|&c| c == 1).collect();
            let acc = |idx: &[usize]| {
                let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
                metrics::accuracy(&p, &t)
            };
            let auc = |idx: &[usize]| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                metrics::auc(&s, &l)
            };
            report
                .metrics
                .push(metrics::report_with_ci("accuracy", n, acc, opts.resamples, opts.seed)?);
            report.metrics.push(metrics::report_with_ci("auc", n, auc, opts.resamples, opts.seed)?);
        }
        LabelSchema::Prognosis => {
            let risks = model.risks(params, records, opts.subset)?;
            let (times, events) = survival_columns(records);
            let cidx = |idx: &[usize]| {
                let s: Vec<f64> = idx.iter().map(|&i| risks[i]).collect();
                let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
                let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
                metrics::c_index(&s, &t, &e)
            };
            report
                .metrics
                .push(metrics::report_with_ci("c_index", n, cidx, opts.resamples, opts.seed)?);
            let mut sorted = risks.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            let mut groups = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
            for i in 0..n {
                let g = &mut groups[(risks[i] > median) as usize];
                g.0.push(times[i]);
                g.1.push(events[i]);
            }
            if groups.iter().all(|g| !g.0.is_empty()) {
                let low = metrics::km_estimate(&groups[0].0, &groups[0].1)?;
                let high = metrics::km_estimate(&groups[1].0, &groups[1].1)?;
                let end = |ts: &[f64]| ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let gap = km_gap(&low, &high, end(&groups[0].0), end(&groups[1].0));
                report.metrics.push(plain("km_gap".into(), gap, n));
                report.km.push(("low_risk".into(), low));
                report.km.push(("high_risk".into(), high));
            }
        }
        LabelSchema::Retrieval => {
            let mods = cfg.modalities.members();
            let emb = mods
                .iter()
                .map(|&m| model.embeddings(params, records, m))
                .collect::<Result<Vec<_>>>()?;
            for a in 0..mods.len() {
                for b in 0..mods.len() {
                    if a == b {
                        continue;
                    }
                    let (lrap, r1, r2) = retrieval_scores(&emb[a], &emb[b], cfg.gallery)?;
                    let dir = direction(mods[a], mods[b]);
                    report.metrics.push(plain(format!("lrap.{}", dir), lrap, n));
                    report.metrics.push(plain(format!("recall@1.{}", dir), r1, n));
                    report.metrics.push(plain(format!("recall@2.{}", dir), r2, n));
                }
            }
        }
    }
    Ok(report)
}

/// `"lab->ecg"` style name of a retrieval direction.
pub fn direction(query: Modality, gallery: Modality) -> String {
    format!("{}->{}", query.name(), gallery.name())
}

/// Mean block masses of records sharing a predicted class and block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean {
    pub predicted: usize,
    pub blocks: Vec<BlockTag>,
    pub count: usize,
    pub guidance: Vec<f64>,
    pub decoder: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub rows: Vec<AttentionRow>,
    pub means: Vec<ClassMean>,
}

pub fn export_attention(ckpt: &Checkpoint, records: &[LabeledRecord]) -> Result<AttentionSummary> {
    if ckpt.config.task == LabelSchema::Retrieval {
        return Err(Error::SchemaMismatch {
            task: "retrieval",
            detail: "retrieval checkpoints have no decoder attention".into(),
        });
    }
    let model = ckpt.model()?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let [l, d] = r.bundle.dims();
        if (l, d) != (model.tokens, model.d) {
            return Err(Error::SchemaMismatch {
                task: ckpt.config.task.name(),
                detail: format!("record {} is {}x{}, model expects {}x{}", r.id, l, d, model.tokens, model.d),
            });
        }
        rows.push(model.attention(&ckpt.params, r)?);
    }
    let mut means: Vec<ClassMean> = Vec::new();
    for row in &rows {
        let slot = match means.iter_mut().find(|m| m.predicted == row.predicted && m.blocks == row.blocks) {
            Some(m) => m,
            None => {
                means.push(ClassMean {
                    predicted: row.predicted,
                    blocks: row.blocks.clone(),
                    count: 0,
                    guidance: vec![0.0; row.blocks.len()],
                    decoder: vec![0.0; row.blocks.len()],
                });
                means.last_mut().unwrap()
            }
        };
        slot.count += 1;
        for (a, b) in slot.guidance.iter_mut().zip(&row.guidance) {
            *a += b;
        }
        for (a, b) in slot.decoder.iter_mut().zip(&row.decoder) {
            *a += b;
        }
    }
    for m in &mut means {
        let c = m.count as f64;
        m.guidance.iter_mut().for_each(|x| *x /= c);
        m.decoder.iter_mut().for_each(|x| *x /= c);
    }
    Ok(AttentionSummary { rows, means })
}
