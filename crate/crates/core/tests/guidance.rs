mod common;

use std::collections::BTreeMap;

use common::*;
use medfuse_core::diff::{backward, forward, Graph, Tensor, TensorMap};
use medfuse_core::error::Error;
use medfuse_core::guidance::{self, GuidanceConfig, GuidanceEncoding, Mode, PromptSlot, Sstc};
use medfuse_core::rng::Stream;
use medfuse_core::vocab::Vocabulary;

fn cfg(d: usize, n_learned: usize, insert_pos: usize) -> GuidanceConfig {
    GuidanceConfig {
        d,
        heads: 2,
        n_learned,
        insert_pos,
        p_drop: 0.1,
    }
}

fn prompts() -> BTreeMap<String, String> {
    [("diagnosis".to_string(), "Is the heart failing".to_string())].into_iter().collect()
}

fn vocab() -> Vocabulary {
    Vocabulary::build(["is the heart failing", "no yes"])
}

fn params(c: &GuidanceConfig, vocab_len: usize, prompt_len: usize, seed: u64, std: f64) -> TensorMap {
    random_params(&guidance::param_specs(c, vocab_len, prompt_len), &mut rng(seed), std)
}

#[test]
fn human_tokens_are_spliced_at_the_insert_position() {
    let v = vocab();
    let ids = v.tokenize("is the heart failing").unwrap();
    for ip in 0..=4 {
        let s = guidance::build_sstc("diagnosis", &prompts(), &v, 4, ip).unwrap();
        assert_eq!(s.len(), 8);
        let layout = s.layout();
        let mut expect: Vec<PromptSlot> = (0..ip).map(PromptSlot::Learned).collect();
        expect.extend(ids.iter().map(|&t| PromptSlot::Human(t)));
        expect.extend((ip..4).map(PromptSlot::Learned));
        assert_eq!(layout, expect);
    }
}

#[test]
fn prompt_construction_errors() {
    let v = vocab();
    assert!(matches!(
        guidance::build_sstc("prognosis", &prompts(), &v, 4, 0),
        Err(Error::UnknownTask(_))
    ));
    assert!(matches!(
        guidance::build_sstc("diagnosis", &prompts(), &v, 4, 5),
        Err(Error::InvalidInput(_))
    ));
    let other: BTreeMap<String, String> = [("diagnosis".to_string(), "kidney".to_string())].into_iter().collect();
    assert!(matches!(
        guidance::build_sstc("diagnosis", &other, &v, 4, 0),
        Err(Error::OutOfVocabulary(_))
    ));
}

#[test]
fn embedded_prompt_follows_the_layout() {
    let v = vocab();
    let s = guidance::build_sstc("diagnosis", &prompts(), &v, 3, 1).unwrap();
    let c = cfg(4, 3, 1);
    let p = params(&c, v.len(), s.len(), 1, 1.0);
    let mut g = Graph::new();
    let enc = guidance::encode_nodes(&mut g, &s, &c, v.len());
    let ev = forward(&g, &p).unwrap();
    let emb = ev.value(enc.embedded);
    for (pos, slot) in s.layout().into_iter().enumerate() {
        let base = match slot {
            PromptSlot::Learned(i) => p[guidance::LEARNED].row_slice(i),
            PromptSlot::Human(t) => p[guidance::TOK_EMB].row_slice(t),
        };
        for j in 0..4 {
            let want = base[j] + p[guidance::POS_EMB].get(pos, j);
            assert!((emb.get(pos, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn prompt_gradients_reach_learned_and_used_token_embeddings_only() {
    let v = vocab();
    let s = guidance::build_sstc("diagnosis", &prompts(), &v, 2, 1).unwrap();
    let c = cfg(4, 2, 1);
    let p = params(&c, v.len(), s.len(), 2, 0.5);
    let mut g = Graph::new();
    let enc = guidance::encode_nodes(&mut g, &s, &c, v.len());
    let w = g.constant(randn(&mut rng(3), s.len(), 4, 1.0));
    let prod = g.mul(enc.z_c, w);
    let loss = g.sum_all(prod);
    let ev = forward(&g, &p).unwrap();
    let grads = backward(&g, &ev, loss).unwrap();
    let learned = &grads[guidance::LEARNED];
    for i in 0..2 {
        assert!(learned.row_slice(i).iter().any(|&x| x.abs() > 1e-8));
    }
    let table = &grads[guidance::TOK_EMB];
    for t in 0..v.len() {
        let used = s.human_tokens.contains(&t);
        let nonzero = table.row_slice(t).iter().any(|&x| x != 0.0);
        assert_eq!(used, nonzero, "token {}", t);
    }
}

fn closed_gate(mut p: TensorMap, d: usize) -> TensorMap {
    p.insert("guidance.gate.w".into(), Tensor::zeros(2 * d, d));
    p.insert("guidance.gate.b".into(), Tensor::full(1, d, -800.0));
    p.insert("guidance.ln.g".into(), Tensor::full(1, d, 1.0));
    p.insert("guidance.ln.b".into(), Tensor::zeros(1, d));
    p
}

#[test]
fn closed_gate_in_evaluation_reduces_to_normalized_residual() {
    let d = 4;
    let c = cfg(d, 2, 0);
    let p = closed_gate(params(&c, 9, 6, 4, 0.5), d);
    let mut r = rng(4);
    let z_all = randn(&mut r, 5, d, 1.0);
    let enc = GuidanceEncoding { z_c: randn(&mut r, 3, d, 1.0) };
    let out = guidance::guide_features(&z_all, &enc, &p, Mode::Eval, 0.3, &mut r).unwrap();
    let expect: Vec<Vec<f64>> = rows(&z_all).iter().map(|x| layer_norm(x, 1e-5)).collect();
    assert!(max_diff(&rows(&out.z_all_c), &expect) < 1e-12);
}

#[test]
fn padded_keys_get_no_attention() {
    let d = 4;
    let c = cfg(d, 2, 0);
    let p = params(&c, 9, 6, 5, 0.5);
    let mut r = rng(5);
    let z_all = randn(&mut r, 2, d, 1.0);
    let enc = GuidanceEncoding { z_c: randn(&mut r, 5, d, 1.0) };
    let out = guidance::guide_features(&z_all, &enc, &p, Mode::Eval, 0.0, &mut r).unwrap();
    assert_eq!(out.attn.dims(), [2, 5]);
    for i in 0..2 {
        let row = out.attn.row_slice(i);
        assert!(row[2..].iter().all(|&a| a < 1e-8));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(guidance::pad_mask(2, 3), vec![false, false, true, false, false, true]);
}

/// Naive evaluation of the guidance filter, padding either side to a common
/// length and masking keys past the fused sequence.
fn oracle(z_all: &Tensor, z_c: &Tensor, p: &TensorMap, scale: f64) -> Vec<Vec<f64>> {
    let (n_a, d) = (z_all.rows(), z_all.cols());
    let n = n_a.max(z_c.rows());
    let pad = |t: &Tensor| {
        let mut r = rows(t);
        r.resize(n, vec![0.0; d]);
        r
    };
    let (za, zc) = (pad(z_all), pad(z_c));
    let proj = |x: &[Vec<f64>], w: &str| {
        affine(&naive_matmul(x, &rows(&p[w])), &p["guidance.proj.w"], &p["guidance.proj.b"])
    };
    let (pka, pva) = (proj(&za, "guidance.w_k"), proj(&za, "guidance.w_v"));
    let (pkc, pvc) = (proj(&zc, "guidance.w_k"), proj(&zc, "guidance.w_v"));
    let mut k = vec![vec![0.0; d]; n];
    let mut v = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            let sv = pva[i][j] + pvc[i][j];
            let guarded = if sv.abs() < 1e-6 { 1e-6f64.copysign(if sv < 0.0 { -1.0 } else { 1.0 }) } else { sv };
            let lam = sigmoid((pka[i][j] + pkc[i][j]) / guarded);
            k[i][j] = lam * pka[i][j] + (1.0 - lam) * pkc[i][j];
            v[i][j] = lam * pva[i][j] + (1.0 - lam) * pvc[i][j];
        }
    }
    let q = naive_matmul(&rows(z_all), &rows(&p["guidance.w_q"]));
    let (att, _) = attention(&q, &k, &v, Some(&|_, j| j >= n_a));
    let mut cat = col_mean(&rows(z_all));
    cat.extend(col_mean(&rows(z_c)));
    let gate: Vec<f64> = affine(&[cat], &p["guidance.gate.w"], &p["guidance.gate.b"])[0]
        .iter()
        .map(|&x| sigmoid(x))
        .collect();
    (0..n_a)
        .map(|i| {
            let s: Vec<f64> = (0..d).map(|j| gate[j] * att[i][j] + scale * z_all.get(i, j)).collect();
            layer_norm(&s, 1e-5)
                .iter()
                .enumerate()
                .map(|(j, x)| x * p["guidance.ln.g"].get(0, j) + p["guidance.ln.b"].get(0, j))
                .collect()
        })
        .collect()
}

#[test]
fn filter_matches_naive_oracle() {
    let d = 3;
    let c = cfg(d, 2, 0);
    for (seed, n_a, t_c, scale) in [(6, 3, 2, 1.0), (7, 2, 4, 1.0 / 0.9), (8, 4, 4, 0.0)] {
        let p = params(&c, 9, 6, seed, 0.6);
        let mut r = rng(seed);
        let z_all = randn(&mut r, n_a, d, 1.0);
        let z_c = randn(&mut r, t_c, d, 1.0);
        let mut g = Graph::new();
        let za = g.constant(z_all.clone());
        let zc = g.constant(z_c.clone());
        let nodes = guidance::guide_nodes(&mut g, za, zc, scale);
        let ev = forward(&g, &p).unwrap();
        let got = rows(ev.value(nodes.z_all_c));
        assert!(max_diff(&got, &oracle(&z_all, &z_c, &p, scale)) < 1e-10, "seed {}", seed);
    }
}

#[test]
fn stochastic_depth_is_unbiased() {
    let p = 0.1;
    let mut r = Stream::new(11, 3);
    let draws: Vec<f64> = (0..10_000).map(|_| guidance::residual_scale(Mode::Train, p, &mut r)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let dropped = draws.iter().filter(|&&x| x == 0.0).count() as f64 / draws.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {}", mean);
    assert!((dropped - p).abs() < 0.01, "dropped {}", dropped);
    assert!(draws.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.9).abs() < 1e-15));
    assert!((0..100).all(|_| guidance::residual_scale(Mode::Eval, p, &mut r) == 1.0));
    assert!((0..100).all(|_| guidance::residual_scale(Mode::Train, 0.0, &mut r) == 1.0));
}

#[test]
fn encoding_has_one_row_per_prompt_position() {
    let v = vocab();
    let s = Sstc {
        human_tokens: v.tokenize("heart failing").unwrap(),
        n_learned: 0,
        insert_pos: 0,
    };
    let c = cfg(4, 0, 0);
    let p = params(&c, v.len(), s.len(), 12, 0.3);
    let enc = guidance::encode_guidance(&s, &c, v.len(), &p).unwrap();
    assert_eq!(enc.z_c.dims(), [2, 4]);
    assert!(enc.z_c.is_finite());
}
