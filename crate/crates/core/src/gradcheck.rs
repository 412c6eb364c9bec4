//! Gradient checks of every learnable component at small shapes.
//!
//! Each case builds a scalar graph over one component with random parameters
//! drawn at a scale where gradients are well away from zero, then compares the
//! reverse-mode gradients with central differences.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::diff::{finite_diff_check, Axis, GradReport, Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionBuilder};
use crate::guidance::{self, GuidanceConfig, Sstc};
use crate::losses::{self, nodes as loss_nodes};
use crate::modality::{Modality, ModalitySet};
use crate::params::{Init, ParamSpec};
use crate::response::{self, DecoderConfig};
use crate::rng::Stream;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
const PARAM_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Fusion,
    Guidance,
    Response,
    Losses,
}

impl CheckModule {
    pub const ALL: [CheckModule; 4] = [
        CheckModule::Fusion,
        CheckModule::Guidance,
        CheckModule::Response,
        CheckModule::Losses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckModule::Fusion => "fusion",
            CheckModule::Guidance => "guidance",
            CheckModule::Response => "response",
            CheckModule::Losses => "losses",
        }
    }

    /// `"all"` or one module name.
    pub fn parse_list(s: &str) -> Result<Vec<CheckModule>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .map(|m| vec![m])
            .ok_or_else(|| Error::InvalidInput(alloc::format!("unknown module `{}`", s)))
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleReport {
    pub module: CheckModule,
    pub cases: Vec<CaseReport>,
}

impl ModuleReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().fold(0.0, |m, c| m.max(c.report.max_rel_err()))
    }

    pub fn param_count(&self) -> usize {
        self.cases.iter().map(|c| c.report.params.len()).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

fn random(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect())
}

/// Random values for every parameter; gains stay near one.
fn random_params(specs: &[ParamSpec], rng: &mut Stream) -> TensorMap {
    specs
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::Ones => random(rng, s.rows, s.cols, 0.2).map(|x| 1.0 + x),
                _ => random(rng, s.rows, s.cols, PARAM_STD),
            };
            (s.name.clone(), t)
        })
        .collect()
}

/// `sum(x * R)` for a fixed random `R`, a scalar touching every entry of `x`.
fn project(g: &mut Graph, x: NodeId, rng: &mut Stream) -> NodeId {
    let [r, c] = g.dims(x);
    let w = g.constant(random(rng, r, c, 1.0));
    let p = g.mul(x, w);
    g.sum_all(p)
}

fn case(name: &str, g: &Graph, params: &TensorMap, seed: NodeId) -> Result<CaseReport> {
    Ok(CaseReport {
        case: name.into(),
        report: finite_diff_check(g, params, seed, STEP)?,
    })
}

fn fusion_cases(rng: &mut Stream) -> Result<Vec<CaseReport>> {
    let (l, d) = (3, 4);
    let specs = fusion::param_specs(d);
    let mut out = Vec::new();
    for (name, set) in [("trimodal", "tsm"), ("bimodal", "sm"), ("unimodal", "t")] {
        let set = ModalitySet::parse(set).unwrap();
        let params = random_params(&specs, rng);
        let mut g = Graph::new();
        let mut inputs = [None; 3];
        for m in set.members() {
            inputs[m.index()] = Some(g.constant(random(rng, l, d, 1.0)));
        }
        let fused = FusionBuilder::new(&mut g, inputs)?.assemble()?;
        let seed = project(&mut g, fused.z_all, rng);
        out.push(case(name, &g, &params, seed)?);
    }
    Ok(out)
}

fn guidance_cases(rng: &mut Stream) -> Result<Vec<CaseReport>> {
    let d = 4;
    let cfg = GuidanceConfig {
        d,
        heads: 2,
        n_learned: 3,
        insert_pos: 1,
        p_drop: 0.1,
    };
    let vocab_len = 6;
    let sstc = Sstc {
        human_tokens: vec![3, 5],
        n_learned: cfg.n_learned,
        insert_pos: cfg.insert_pos,
    };
    let specs = guidance::param_specs(&cfg, vocab_len, sstc.len());
    let mut out = Vec::new();
    // Fused sequences shorter, equal to and longer than the prompt.
    for (name, n_a, scale) in [("short", 3, 1.0), ("equal", 5, 1.0 / 0.9), ("long", 6, 0.0)] {
        let params = random_params(&specs, rng);
        let mut g = Graph::new();
        let enc = guidance::encode_nodes(&mut g, &sstc, &cfg, vocab_len);
        let z_all = g.constant(random(rng, n_a, d, 1.0).map(f64::abs));
        let guided = guidance::guide_nodes(&mut g, z_all, enc.z_c, scale);
        let seed = project(&mut g, guided.z_all_c, rng);
        out.push(case(name, &g, &params, seed)?);
    }
    Ok(out)
}

fn response_cases(rng: &mut Stream) -> Result<Vec<CaseReport>> {
    let d = 4;
    let cfg = DecoderConfig {
        d,
        heads: 2,
        vocab_len: 6,
        max_len: 3,
        start_id: 1,
    };
    let mut out = Vec::new();
    {
        let params = random_params(&response::decoder_specs(&cfg), rng);
        let mut g = Graph::new();
        let memory = g.constant(random(rng, 5, d, 1.0));
        let a = response::score_nodes(&mut g, memory, &[3, 4, 2], &cfg)?;
        let b = response::score_nodes(&mut g, memory, &[5, 2], &cfg)?;
        let seed = g.add(a.total, b.mean);
        out.push(case("decoder", &g, &params, seed)?);
    }
    {
        let params = random_params(&response::risk_specs(d), rng);
        let mut g = Graph::new();
        let memory = g.constant(random(rng, 5, d, 1.0));
        let seed = response::risk_node(&mut g, memory);
        out.push(case("risk", &g, &params, seed)?);
    }
    {
        let params = random_params(&response::retrieval_specs(d, 3), rng);
        let mut g = Graph::new();
        let mut terms = Vec::new();
        for m in Modality::ALL {
            let pooled = g.constant(random(rng, 4, d, 1.0));
            let e = response::retrieval_node(&mut g, m, pooled, 3);
            terms.push(project(&mut g, e, rng));
        }
        let s = g.add(terms[0], terms[1]);
        let seed = g.add(s, terms[2]);
        out.push(case("retrieval", &g, &params, seed)?);
    }
    Ok(out)
}

/// Risks whose pairwise margins stay clear of the hinge kink, and where no
/// sample's active-pair contributions cancel to an exact zero gradient (whose
/// central difference would be pure rounding noise).
fn risks_off_kink(rng: &mut Stream, n: usize, pairs: &[(usize, usize)], margin: f64) -> Tensor {
    loop {
        let r = random(rng, n, 1, 1.0);
        let hinge = |i: usize, j: usize| -(r.get(i, 0) - r.get(j, 0)) + margin;
        let clear = pairs.iter().all(|&(i, j)| libm::fabs(hinge(i, j)) > 1e-2);
        let mut net = vec![0i32; n];
        let mut touched = vec![false; n];
        for &(i, j) in pairs.iter().filter(|&&(i, j)| hinge(i, j) > 0.0) {
            net[i] -= 1;
            net[j] += 1;
            touched[i] = true;
            touched[j] = true;
        }
        let no_cancel = (0..n).all(|k| !touched[k] || net[k] != 0);
        if clear && no_cancel {
            return r;
        }
    }
}

fn loss_cases(rng: &mut Stream) -> Result<Vec<CaseReport>> {
    let w = losses::LossWeights {
        lambda_lm: 1.0,
        lambda_mc: 0.7,
        lambda_unlikely: 0.5,
        lambda_dig: 0.8,
        lambda_r: 1.0,
        lambda_m: 0.6,
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut one = |name: &str, params: TensorMap, build: &dyn Fn(&mut Graph) -> NodeId| -> Result<()> {
        let mut g = Graph::new();
        let seed = build(&mut g);
        out.push(case(name, &g, &params, seed)?);
        Ok(())
    };
    let bind = |pairs: Vec<(&str, Tensor)>| -> TensorMap { pairs.into_iter().map(|(k, v)| (String::from(k), v)).collect() };
    let negative = |rng: &mut Stream, c: usize| Tensor::matrix(1, c, (0..c).map(|_| -0.3 - 2.0 * rng.uniform()).collect());

    one("ce", bind(vec![("logits", random(rng, 1, 4, 1.0))]), &|g| {
        let x = g.param("logits", 1, 4);
        loss_nodes::ce_from_logits(g, x, 2)
    })?;
    one("unlikelihood", bind(vec![("totals", negative(rng, 3))]), &|g| {
        let x = g.param("totals", 1, 3);
        loss_nodes::unlikelihood(g, x, 1, w.epsilon)
    })?;
    one(
        "diagnosis",
        bind(vec![("totals", negative(rng, 3)), ("means", negative(rng, 3))]),
        &|g| {
            let t = g.param("totals", 1, 3);
            let m = g.param("means", 1, 3);
            let pick = g.slice(m, Axis::Cols, 0, 1);
            let lm = g.scale(pick, -1.0);
            let mc = loss_nodes::ce_from_logits(g, m, 0);
            let ul = loss_nodes::unlikelihood(g, t, 0, w.epsilon);
            loss_nodes::weighted_sum(g, &[(w.lambda_lm, lm), (w.lambda_mc, mc), (w.lambda_unlikely, ul)])
        },
    )?;

    let times = [3.0, 1.0, 4.5, 2.0, 6.0, 5.0];
    let events = [true, true, false, true, false, true];
    let pairs = losses::comparable_pairs(&times, &events);
    let ys = vec![1.0; pairs.len()];
    let n = times.len();
    one("cox", bind(vec![("risks", random(rng, n, 1, 1.0))]), &|g| {
        let r = g.param("risks", n, 1);
        loss_nodes::cox(g, r, &times, &events)
    })?;
    one("margin_rank", bind(vec![("risks", risks_off_kink(rng, n, &pairs, w.margin))]), &|g| {
        let r = g.param("risks", n, 1);
        loss_nodes::margin_rank(g, r, &pairs, &ys, w.margin)
    })?;
    one(
        "prognosis",
        bind(vec![
            ("risks", risks_off_kink(rng, n, &pairs, w.margin)),
            ("logits", random(rng, 1, 2, 1.0)),
        ]),
        &|g| {
            let r = g.param("risks", n, 1);
            let l = g.param("logits", 1, 2);
            let dig = loss_nodes::ce_from_logits(g, l, 1);
            let cox = loss_nodes::cox(g, r, &times, &events);
            let rank = loss_nodes::margin_rank(g, r, &pairs, &ys, w.margin);
            loss_nodes::weighted_sum(g, &[(w.lambda_dig, dig), (w.lambda_r, cox), (w.lambda_m, rank)])
        },
    )?;
    one(
        "contrastive",
        bind(vec![("v", random(rng, 4, 3, 1.0)), ("u", random(rng, 4, 3, 1.0))]),
        &|g| {
            let v = g.param("v", 4, 3);
            let u = g.param("u", 4, 3);
            let vn = g.l2_normalize_rows(v);
            let un = g.l2_normalize_rows(u);
            loss_nodes::contrastive(g, vn, un, 0.5)
        },
    )?;
    Ok(out)
}

/// Run the gradient check of one module.
pub fn check_module(module: CheckModule, seed: u64) -> Result<ModuleReport> {
    let mut rng = Stream::new(seed, 0x6772_6164);
    let cases = match module {
        CheckModule::Fusion => fusion_cases(&mut rng)?,
        CheckModule::Guidance => guidance_cases(&mut rng)?,
        CheckModule::Response => response_cases(&mut rng)?,
        CheckModule::Losses => loss_cases(&mut rng)?,
    };
    Ok(ModuleReport { module, cases })
}

/// Worst relative error per parameter across all cases of a report.
pub fn worst_by_param(report: &ModuleReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for c in &report.cases {
        for p in &c.report.params {
            let e = m.entry(alloc::format!("{}/{}", c.case, p.name)).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
    }
    m
}
