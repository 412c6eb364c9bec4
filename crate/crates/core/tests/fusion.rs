mod common;

use common::*;
use medfuse_core::diff::{backward, forward, Graph, Tensor, TensorMap};
use medfuse_core::fusion::{self, BlockTag, FusionBuilder, MixedKV, QkvSet};
use medfuse_core::modality::{Modality, ModalityBundle, ModalitySet};
use proptest::prelude::*;

const T: Modality = Modality::Lab;
const S: Modality = Modality::Ecg;
const M: Modality = Modality::Echo;

fn set(mods: &[Modality]) -> ModalitySet {
    ModalitySet::of(mods)
}

fn bundle(rng: &mut medfuse_core::rng::Stream, l: usize, d: usize, present: ModalitySet) -> ModalityBundle {
    let slots = Modality::ALL.map(|m| present.contains(m).then(|| randn(rng, l, d, 1.0)));
    ModalityBundle::from_slots(slots).unwrap()
}

fn params(seed: u64, d: usize, std: f64) -> TensorMap {
    random_params(&fusion::param_specs(d), &mut rng(seed), std)
}

fn with(mut p: TensorMap, name: &str, t: Tensor) -> TensorMap {
    p.insert(name.to_string(), t);
    p
}

#[test]
fn identity_projection_returns_inputs() {
    let mut r = rng(1);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let p = with(params(1, 4, 0.3), fusion::W_Q, Tensor::identity(4));
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    for m in Modality::ALL {
        assert_eq!(qkv.q(m).unwrap(), b.get(m).unwrap());
    }
}

#[test]
fn zero_projection_returns_zeros() {
    let mut r = rng(2);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let p = with(params(2, 4, 0.3), fusion::W_K, Tensor::zeros(4, 4));
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    for m in Modality::ALL {
        assert!(qkv.k(m).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn projection_matches_naive_matmul() {
    let mut r = rng(3);
    let b = bundle(&mut r, 2, 3, ModalitySet::ALL);
    let p = params(3, 3, 0.5);
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    for m in Modality::ALL {
        let z = rows(b.get(m).unwrap());
        let q = naive_matmul(&z, &rows(&p[fusion::W_Q]));
        let k = naive_matmul(&z, &rows(&p[fusion::W_K]));
        let v = naive_matmul(&z, &rows(&p[fusion::W_V]));
        assert!(max_diff(&rows(qkv.q(m).unwrap()), &q) < 1e-12);
        assert!(max_diff(&rows(qkv.k(m).unwrap()), &k) < 1e-12);
        assert!(max_diff(&rows(qkv.v(m).unwrap()), &v) < 1e-12);
    }
}

fn hand_qkv(k: [f64; 3], v: [f64; 3]) -> QkvSet {
    let one = |x: f64| Some(Tensor::matrix(1, 1, vec![x]));
    QkvSet {
        q: [one(1.0), one(1.0), one(1.0)],
        k: k.map(one),
        v: v.map(one),
    }
}

fn identity_proj(d: usize) -> TensorMap {
    let mut p = params(0, d, 0.1);
    p.insert(fusion::PROJ_W.into(), Tensor::identity(d));
    p.insert(fusion::PROJ_B.into(), Tensor::zeros(1, d));
    p
}

#[test]
fn zero_projected_sums_give_half_weights_and_zero_mix() {
    let mut r = rng(4);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let mut p = params(4, 4, 0.3);
    p.insert(fusion::PROJ_W.into(), Tensor::zeros(4, 4));
    p.insert(fusion::PROJ_B.into(), Tensor::zeros(1, 4));
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    let mix = fusion::mix_kv(&qkv, ModalitySet::ALL, &p).unwrap();
    assert!(mix.lambda_k1.data().iter().all(|&x| x == 0.5));
    assert!(mix.lambda_k2.data().iter().all(|&x| x == 0.5));
    assert!(mix.k_mix.data().iter().all(|&x| x == 0.0));
    assert!(mix.v_mix.data().iter().all(|&x| x == 0.0));
}

#[test]
fn trimodal_mix_matches_scalar_oracle() {
    let (k, v) = ([0.3, -1.2, 0.7], [1.1, 0.4, -0.9]);
    let mix = fusion::mix_kv(&hand_qkv(k, v), ModalitySet::ALL, &identity_proj(1)).unwrap();
    let l1 = sigmoid((k[0] + k[1] + k[2]) / (v[0] + v[1] + v[2]));
    let l2 = sigmoid((k[0] + k[1]) / (v[0] + v[1]));
    let km = l1 * k[0] + l2 * k[1] + (1.0 - l1 - l2) * k[2];
    let vm = l1 * v[0] + l2 * v[1] + (1.0 - l1 - l2) * v[2];
    assert!((mix.lambda_k1.item() - l1).abs() < 1e-12);
    assert!((mix.lambda_v1.item() - l1).abs() < 1e-12);
    assert!((mix.lambda_k2.item() - l2).abs() < 1e-12);
    assert!((mix.k_mix.item() - km).abs() < 1e-12);
    assert!((mix.v_mix.item() - vm).abs() < 1e-12);
}

#[test]
fn pair_mix_matches_scalar_oracle_and_reports_unused_weight_as_one() {
    let (k, v) = ([0.5, 0.0, -2.0], [0.25, 0.0, 1.5]);
    let mix = fusion::mix_kv(&hand_qkv(k, v), set(&[T, M]), &identity_proj(1)).unwrap();
    let lam = sigmoid((k[0] + k[2]) / (v[0] + v[2]));
    assert!((mix.lambda_k2.item() - lam).abs() < 1e-12);
    assert_eq!(mix.lambda_k1.item(), 1.0);
    assert!((mix.k_mix.item() - (lam * k[0] + (1.0 - lam) * k[2])).abs() < 1e-12);
    assert!((mix.v_mix.item() - (lam * v[0] + (1.0 - lam) * v[2])).abs() < 1e-12);
}

#[test]
fn near_zero_value_sum_is_guarded_with_its_sign() {
    let (k, v) = ([1e-3, 0.0, 0.0], [1e-9, -1e-9, -5e-8]);
    let mix = fusion::mix_kv(&hand_qkv(k, v), ModalitySet::ALL, &identity_proj(1)).unwrap();
    // value sum is negative and tiny: divide by -1e-6, then clip to -36
    let l1 = sigmoid(-fusion::RATIO_CLIP);
    assert_eq!(mix.lambda_k1.item(), l1);
    assert!(mix.lambda_k1.item() > 0.0);
    assert!(mix.k_mix.is_finite());
}

#[test]
fn huge_ratios_keep_weights_strictly_inside_unit_interval() {
    for (k, v) in [([5.0, 0.0, 0.0], [1e-7, 0.0, 0.0]), ([-5.0, 0.0, 0.0], [1e-7, 0.0, 0.0])] {
        let mix = fusion::mix_kv(&hand_qkv(k, v), ModalitySet::ALL, &identity_proj(1)).unwrap();
        for lam in [mix.lambda_k1.item(), mix.lambda_k2.item()] {
            assert!(lam > 0.0 && lam < 1.0, "{}", lam);
        }
    }
}

#[test]
fn unimodal_mix_is_the_projection() {
    let mut r = rng(5);
    let b = bundle(&mut r, 3, 4, set(&[S]));
    let p = params(5, 4, 0.4);
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    let mix = fusion::mix_kv(&qkv, set(&[S]), &p).unwrap();
    let pk = affine(&rows(qkv.k(S).unwrap()), &p[fusion::PROJ_W], &p[fusion::PROJ_B]);
    let pv = affine(&rows(qkv.v(S).unwrap()), &p[fusion::PROJ_W], &p[fusion::PROJ_B]);
    assert!(max_diff(&rows(&mix.k_mix), &pk) < 1e-12);
    assert!(max_diff(&rows(&mix.v_mix), &pv) < 1e-12);
}

#[test]
fn mix_rejects_absent_subset() {
    let mut r = rng(6);
    let b = bundle(&mut r, 2, 2, set(&[T, S]));
    let p = params(6, 2, 0.3);
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    assert!(fusion::mix_kv(&qkv, set(&[M]), &p).is_err());
    assert!(fusion::mix_kv(&qkv, ModalitySet::EMPTY, &p).is_err());
}

fn mixed(k: Tensor, v: Tensor) -> MixedKV {
    let ones = Tensor::full(k.rows(), k.cols(), 1.0);
    MixedKV {
        k_mix: k,
        v_mix: v,
        lambda_k1: ones.clone(),
        lambda_v1: ones.clone(),
        lambda_k2: ones.clone(),
        lambda_v2: ones,
    }
}

fn qkv_with_query(q: Tensor) -> QkvSet {
    QkvSet {
        q: [Some(q.clone()), None, None],
        k: [Some(q.clone()), None, None],
        v: [Some(q), None, None],
    }
}

#[test]
fn single_token_attention_returns_the_value() {
    let mut r = rng(7);
    let q = randn(&mut r, 1, 3, 1.0);
    let v = randn(&mut r, 1, 3, 1.0);
    let (out, attn) = fusion::local_fuse(T, &qkv_with_query(q), &mixed(randn(&mut r, 1, 3, 1.0), v.clone())).unwrap();
    assert_eq!(attn.data(), &[1.0]);
    assert!(max_diff(&rows(&out), &rows(&v)) < 1e-15);
}

#[test]
fn orthogonal_query_gives_uniform_weights() {
    let mut r = rng(8);
    let q = Tensor::zeros(2, 3);
    let v = randn(&mut r, 4, 3, 1.0);
    let (out, attn) = fusion::local_fuse(T, &qkv_with_query(q), &mixed(randn(&mut r, 4, 3, 1.0), v.clone())).unwrap();
    assert!(attn.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    let mean = col_mean(&rows(&v));
    for i in 0..2 {
        for j in 0..3 {
            assert!((out.get(i, j) - mean[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn local_attention_matches_brute_force() {
    let mut r = rng(9);
    let q = randn(&mut r, 3, 2, 1.0);
    let k = randn(&mut r, 3, 2, 1.0);
    let v = randn(&mut r, 3, 2, 1.0);
    let (out, attn) = fusion::local_fuse(T, &qkv_with_query(q.clone()), &mixed(k.clone(), v.clone())).unwrap();
    let (o, w) = attention(&rows(&q), &rows(&k), &rows(&v), None);
    assert!(max_diff(&rows(&out), &o) < 1e-12);
    assert!(max_diff(&rows(&attn), &w) < 1e-12);
}

#[test]
fn gate_is_half_with_zero_weights_and_saturates_with_large_bias() {
    let mut r = rng(10);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let local = randn(&mut r, 3, 4, 1.0);
    let mut p = with(params(10, 4, 0.3), fusion::GATE_W, Tensor::zeros(16, 4));
    p.insert(fusion::GATE_B.into(), Tensor::zeros(1, 4));
    let g = fusion::global_gate(&b, ModalitySet::ALL, &local, &p).unwrap();
    assert!(g.data().iter().all(|&x| x == 0.5));
    p.insert(fusion::GATE_B.into(), Tensor::full(1, 4, 20.0));
    let g = fusion::global_gate(&b, ModalitySet::ALL, &local, &p).unwrap();
    assert!(g.data().iter().all(|&x| x > 1.0 - 1e-6));
}

#[test]
fn gate_matches_oracle_with_zero_filled_slots() {
    let mut r = rng(11);
    let d = 3;
    let b = bundle(&mut r, 2, d, ModalitySet::ALL);
    let local = randn(&mut r, 2, d, 1.0);
    let p = params(11, d, 0.5);
    let subset = set(&[T, M]);
    let g = fusion::global_gate(&b, subset, &local, &p).unwrap();
    let mean = |m: Modality| col_mean(&rows(b.get(m).unwrap()));
    let mut cat = mean(T);
    cat.extend(vec![0.0; d]);
    cat.extend(col_mean(&rows(&local)));
    cat.extend(mean(M));
    let logits = affine(&[cat], &p[fusion::GATE_W], &p[fusion::GATE_B]);
    let expect: Vec<f64> = logits[0].iter().map(|&x| sigmoid(x)).collect();
    assert_eq!(g.rows(), 1);
    for j in 0..d {
        assert!((g.get(0, j) - expect[j]).abs() < 1e-12);
    }
}

fn gate_forced(p: TensorMap, d: usize, bias: f64) -> TensorMap {
    let p = with(p, fusion::GATE_W, Tensor::zeros(4 * d, d));
    with(p, fusion::GATE_B, Tensor::full(1, d, bias))
}

#[test]
fn saturated_gates_pass_local_features_through() {
    let mut r = rng(12);
    let b = bundle(&mut r, 3, 4, set(&[T]));
    let p = gate_forced(params(12, 4, 0.4), 4, 800.0);
    let fused = fusion::fuse_subset(&b, set(&[T]), &p).unwrap();
    let qkv = fusion::qkv_project(&b, &p).unwrap();
    let mix = fusion::mix_kv(&qkv, set(&[T]), &p).unwrap();
    let (local, _) = fusion::local_fuse(T, &qkv, &mix).unwrap();
    assert_eq!(fused, local);
}

#[test]
fn closed_gates_zero_the_shared_block() {
    let mut r = rng(13);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let p = gate_forced(params(13, 4, 0.4), 4, -800.0);
    let fused = fusion::fuse_subset(&b, ModalitySet::ALL, &p).unwrap();
    assert!(fused.data().iter().all(|&x| x == 0.0));
}

#[test]
fn shared_block_is_the_gated_sum_of_local_features() {
    let mut r = rng(14);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let p = params(14, 4, 0.4);
    for subset in [set(&[S, M]), ModalitySet::ALL] {
        let fused = fusion::fuse_subset(&b, subset, &p).unwrap();
        let qkv = fusion::qkv_project(&b, &p).unwrap();
        let mix = fusion::mix_kv(&qkv, subset, &p).unwrap();
        let mut expect = vec![vec![0.0; 4]; 3];
        for m in subset.members() {
            let (local, _) = fusion::local_fuse(m, &qkv, &mix).unwrap();
            let gate = fusion::global_gate(&b, subset, &local, &p).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    expect[i][j] += gate.get(0, j) * local.get(i, j);
                }
            }
        }
        assert!(max_diff(&rows(&fused), &expect) < 1e-12);
    }
}

#[test]
fn block_counts_and_order_follow_presence() {
    let mut r = rng(15);
    let p = params(15, 4, 0.3);
    let cases = [
        (ModalitySet::ALL, "t,ts,s,sm,m,tm,tsm"),
        (set(&[T, M]), "t,tm,m"),
        (set(&[S, M]), "s,sm,m"),
        (set(&[M]), "m,self-m"),
    ];
    for (present, layout) in cases {
        let b = bundle(&mut r, 3, 4, present);
        let fused = fusion::assemble_all(&b, &p).unwrap();
        assert_eq!(fusion::layout_string(&fused.tags()), layout);
        assert_eq!(fused.z_all().rows(), 3 * fused.len());
        assert!(fused.z_all().data().iter().all(|&x| x >= 0.0));
        for (i, span) in fused.spans.iter().enumerate() {
            assert_eq!(span.tokens, 3 * i..3 * i + 3);
        }
    }
}

#[test]
fn specific_blocks_are_rectified_inputs() {
    let mut r = rng(16);
    let b = bundle(&mut r, 3, 4, ModalitySet::ALL);
    let fused = fusion::assemble_all(&b, &params(16, 4, 0.3)).unwrap();
    for (tag, block) in &fused.blocks {
        if let BlockTag::Specific(m) = tag {
            assert_eq!(*block, b.get(*m).unwrap().map(|x| x.max(0.0)));
        }
    }
}

#[test]
fn unimodal_reduction_is_gated_self_attention_over_projections() {
    let mut r = rng(17);
    let d = 4;
    let b = bundle(&mut r, 3, d, set(&[S]));
    let p = gate_forced(params(17, d, 0.4), d, 800.0);
    let fused = fusion::assemble_all(&b, &p).unwrap();
    let z = rows(b.get(S).unwrap());
    let q = naive_matmul(&z, &rows(&p[fusion::W_Q]));
    let k = naive_matmul(&z, &rows(&p[fusion::W_K]));
    let v = naive_matmul(&z, &rows(&p[fusion::W_V]));
    let pk = affine(&k, &p[fusion::PROJ_W], &p[fusion::PROJ_B]);
    let pv = affine(&v, &p[fusion::PROJ_W], &p[fusion::PROJ_B]);
    let (o, _) = attention(&q, &pk, &pv, None);
    let expect: Vec<Vec<f64>> = o.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect();
    let (tag, block) = &fused.blocks[1];
    assert_eq!(*tag, BlockTag::SelfFused(S));
    assert!(max_diff(&rows(block), &expect) < 1e-12);
}

#[test]
fn absent_gate_slots_receive_no_gradient() {
    let mut r = rng(18);
    let d = 3;
    let b = bundle(&mut r, 2, d, set(&[T, S]));
    let p = params(18, d, 0.5);
    let mut g = Graph::new();
    let inputs = fusion::bundle_inputs(&mut g, &b);
    let fused = FusionBuilder::new(&mut g, inputs).unwrap().assemble().unwrap();
    let loss = g.sum_all(fused.z_all);
    let ev = forward(&g, &p).unwrap();
    let grads = backward(&g, &ev, loss).unwrap();
    let gw = &grads[fusion::GATE_W];
    // rows 3d..4d belong to the echo slot
    for i in 3 * d..4 * d {
        assert!(gw.row_slice(i).iter().all(|&x| x == 0.0));
    }
    assert!(gw.row_slice(0).iter().any(|&x| x != 0.0));
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row_slice(i)).collect();
    Tensor::from_rows(&rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_sum_to_one_and_weights_stay_open(seed in 0u64..10_000, l in 1usize..5, d in 1usize..5) {
        let mut r = rng(seed);
        let b = bundle(&mut r, l, d, ModalitySet::ALL);
        let p = params(seed, d, 0.5);
        let qkv = fusion::qkv_project(&b, &p).unwrap();
        for subset in ModalitySet::nonempty_subsets() {
            let mix = fusion::mix_kv(&qkv, subset, &p).unwrap();
            for lam in [&mix.lambda_k1, &mix.lambda_k2] {
                prop_assert!(lam.data().iter().all(|&x| x > 0.0 && x <= 1.0));
            }
            for m in subset.members() {
                let (local, attn) = fusion::local_fuse(m, &qkv, &mix).unwrap();
                for i in 0..l {
                    let s: f64 = attn.row_slice(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
                let gate = fusion::global_gate(&b, subset, &local, &p).unwrap();
                prop_assert!(gate.data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn token_permutation_permutes_every_block(seed in 0u64..10_000, l in 2usize..5) {
        let mut r = rng(seed);
        let d = 3;
        let b = bundle(&mut r, l, d, ModalitySet::ALL);
        let p = params(seed, d, 0.5);
        let mut perm: Vec<usize> = (0..l).collect();
        r.shuffle(&mut perm);
        let slots = Modality::ALL.map(|m| Some(permute_rows(b.get(m).unwrap(), &perm)));
        let pb = ModalityBundle::from_slots(slots).unwrap();
        let base = fusion::assemble_all(&b, &p).unwrap();
        let moved = fusion::assemble_all(&pb, &p).unwrap();
        for ((_, x), (_, y)) in base.blocks.iter().zip(&moved.blocks) {
            prop_assert!(max_diff(&rows(&permute_rows(x, &perm)), &rows(y)) < 1e-12);
        }
    }
}
