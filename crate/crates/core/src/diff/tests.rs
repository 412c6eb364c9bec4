use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::rng::Stream;

fn bind(pairs: &[(&str, Tensor)]) -> TensorMap {
    pairs.iter().map(|(k, v)| ((*k).into(), v.clone())).collect()
}

fn rand_tensor(s: &mut Stream, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| lo + (hi - lo) * s.uniform()).collect())
}

#[test]
fn square_forward_and_backward() {
    let mut g = Graph::new();
    let x = g.param("x", 1, 1);
    let y = g.mul(x, x);
    g.mark_output("y", y);
    let b = bind(&[("x", Tensor::scalar(3.0))]);
    let ev = forward(&g, &b).unwrap();
    assert_eq!(ev.output("y").unwrap().item(), 9.0);
    let grads = backward(&g, &ev, y).unwrap();
    assert_eq!(grads["x"].item(), 6.0);
    let rep = finite_diff_check(&g, &b, y, 1e-4).unwrap();
    assert!(rep.max_rel_err() < 1e-7, "{:?}", rep);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut g = Graph::new();
    let x = g.param("x", 1, 1);
    let y = g.sigmoid(x);
    let ev = forward(&g, &bind(&[("x", Tensor::scalar(0.0))])).unwrap();
    assert_eq!(ev.value(y).item(), 0.5);
    assert_eq!(backward(&g, &ev, y).unwrap()["x"].item(), 0.25);
}

#[test]
fn softmax_uniform_and_sum_has_zero_gradient() {
    let mut g = Graph::new();
    let v = g.param("v", 1, 3);
    let s = g.softmax(v);
    let total = g.sum_all(s);
    let ev = forward(&g, &bind(&[("v", Tensor::row(&[0.0, 0.0, 0.0]))])).unwrap();
    for &p in ev.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let ev = forward(&g, &bind(&[("v", Tensor::row(&[0.3, -1.2, 2.0]))])).unwrap();
    let grad = backward(&g, &ev, total).unwrap();
    assert!(grad["v"].max_abs() < 1e-15);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 4);
    let y = g.layer_norm(x, 1e-5);
    let ev = forward(&g, &bind(&[("x", Tensor::row(&[2.5; 4]))])).unwrap();
    assert!(ev.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn unused_parameter_gets_exact_zero() {
    let mut g = Graph::new();
    let a = g.param("a", 1, 2);
    let _b = g.param("b", 2, 2);
    let y = g.sum_all(a);
    let b = bind(&[("a", Tensor::row(&[1.0, 2.0])), ("b", Tensor::zeros(2, 2))]);
    let ev = forward(&g, &b).unwrap();
    let grads = backward(&g, &ev, y).unwrap();
    assert_eq!(grads["b"], Tensor::zeros(2, 2));
    assert_eq!(grads["a"].data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_seed_rejected() {
    let mut g = Graph::new();
    let a = g.param("a", 1, 2);
    let ev = forward(&g, &bind(&[("a", Tensor::row(&[1.0, 2.0]))])).unwrap();
    assert!(matches!(backward(&g, &ev, a), Err(crate::Error::NonScalarSeed { .. })));
}

#[test]
fn shape_error_names_the_node() {
    let mut g = Graph::new();
    let a = g.input("a", 2, 3);
    let b = g.input("b", 2, 3);
    let _ = g.constant(Tensor::zeros(1, 1));
    let _c = g.matmul(a, b);
    let b = bind(&[("a", Tensor::zeros(2, 3)), ("b", Tensor::zeros(2, 3))]);
    match forward(&g, &b) {
        Err(crate::Error::ShapeMismatch { node, op, .. }) => {
            assert_eq!(node, 3);
            assert_eq!(op, "matmul");
        }
        other => panic!("{:?}", other),
    }
}

#[test]
fn checked_mode_rejects_division_by_zero_and_non_finite() {
    let mut g = Graph::new();
    let a = g.input("a", 1, 1);
    let b = g.input("b", 1, 1);
    let _ = g.div(a, b);
    let r = forward(&g, &bind(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(0.0))]));
    assert!(matches!(r, Err(crate::Error::DivisionByZero { node: 2 })));

    let mut g = Graph::new();
    let a = g.input("a", 1, 1);
    let _ = g.log(a);
    let r = forward(&g, &bind(&[("a", Tensor::scalar(-1.0))]));
    assert!(matches!(r, Err(crate::Error::NonFinite { node: 1, op: "log" })));
}

#[test]
fn forward_is_bit_identical_on_repeat() {
    let mut s = Stream::new(11, 0);
    let mut g = Graph::new();
    let w = g.param("w", 3, 4);
    let x = g.input("x", 2, 3);
    let h = g.matmul(x, w);
    let sm = g.softmax(h);
    let ln = g.layer_norm(sm, 1e-5);
    let y = g.sum_all(ln);
    let b = bind(&[("w", rand_tensor(&mut s, 3, 4, -2.0, 2.0)), ("x", rand_tensor(&mut s, 2, 3, -2.0, 2.0))]);
    let e1 = forward(&g, &b).unwrap();
    let e2 = forward(&g, &b).unwrap();
    assert_eq!(e1.value(y).item().to_bits(), e2.value(y).item().to_bits());
}

#[test]
fn concat_routes_gradients_disjointly() {
    let mut g = Graph::new();
    let a = g.param("a", 2, 2);
    let b = g.param("b", 3, 2);
    let c = g.concat(&[a, b], Axis::Rows);
    let w = g.constant(Tensor::matrix(5, 2, (0..10).map(|i| i as f64).collect()));
    let m = g.mul(c, w);
    let y = g.sum_all(m);
    let bnd = bind(&[("a", Tensor::zeros(2, 2)), ("b", Tensor::zeros(3, 2))]);
    let ev = forward(&g, &bnd).unwrap();
    let grads = backward(&g, &ev, y).unwrap();
    assert_eq!(grads["a"].len() + grads["b"].len(), 10);
    assert_eq!(grads["a"].data(), &[0.0, 1.0, 2.0, 3.0]);
    assert_eq!(grads["b"].data(), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
}

#[test]
fn zero_parameter_graph_gives_empty_report() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 1);
    let y = g.mul(x, x);
    let rep = finite_diff_check(&g, &bind(&[("x", Tensor::scalar(2.0))]), y, 1e-5).unwrap();
    assert!(rep.is_empty());
    assert_eq!(rep.worst(), None);
}

type Builder = fn(&mut Graph, NodeId, NodeId) -> NodeId;

/// Every primitive against central differences, 100 seeded trials each.
#[test]
fn primitives_match_central_differences() {
    let cases: Vec<(&str, Builder, (f64, f64))> = vec![
        ("matmul", |g, a, b| {
            let bt = g.transpose(b);
            g.matmul(a, bt)
        }, (-2.0, 2.0)),
        ("add", |g, a, b| g.add(a, b), (-2.0, 2.0)),
        ("add_bcast", |g, a, b| {
            let r = g.slice(b, Axis::Rows, 0, 1);
            g.add(a, r)
        }, (-2.0, 2.0)),
        ("sub", |g, a, b| g.sub(a, b), (-2.0, 2.0)),
        ("mul", |g, a, b| g.mul(a, b), (-2.0, 2.0)),
        ("mul_bcast", |g, a, b| {
            let c = g.slice(b, Axis::Cols, 1, 1);
            g.mul(a, c)
        }, (-2.0, 2.0)),
        ("div", |g, a, b| {
            let d = g.exp(b);
            g.div(a, d)
        }, (-2.0, 2.0)),
        ("concat_cols", |g, a, b| {
            let c = g.concat(&[a, b], Axis::Cols);
            g.mul(c, c)
        }, (-2.0, 2.0)),
        ("transpose", |g, a, b| {
            let t = g.transpose(a);
            g.matmul(t, b)
        }, (-2.0, 2.0)),
        ("reshape", |g, a, b| {
            let r = g.reshape(a, 1, 6);
            let s = g.reshape(b, 6, 1);
            g.matmul(r, s)
        }, (-2.0, 2.0)),
        ("softmax", |g, a, b| {
            let s = g.softmax(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("log_softmax", |g, a, b| {
            let s = g.log_softmax(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("sigmoid", |g, a, b| {
            let s = g.sigmoid(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("relu", |g, a, b| {
            let s = g.relu(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("exp", |g, a, b| {
            let s = g.exp(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("log", |g, a, b| {
            let e = g.exp(a);
            let p = g.add_scalar(e, 0.5);
            let s = g.log(p);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("mean_rows", |g, a, b| {
            let m = g.mean(a, Axis::Rows);
            let n = g.mean(b, Axis::Cols);
            let mm = g.mul(m, m);
            let nn = g.mul(n, n);
            let s1 = g.sum_all(mm);
            let s2 = g.sum_all(nn);
            g.add(s1, s2)
        }, (-2.0, 2.0)),
        ("layer_norm", |g, a, b| {
            let s = g.layer_norm(a, 1e-5);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("scale_add_scalar", |g, a, b| {
            let s = g.scale(a, -1.7);
            let t = g.add_scalar(s, 0.3);
            g.mul(t, b)
        }, (-2.0, 2.0)),
        ("masked_fill", |g, a, b| {
            let m = g.masked_fill(a, vec![false, true, false, false, false, true]);
            let s = g.softmax(m);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("sign_safe", |g, a, b| {
            let s = g.sign_safe(a, 1e-6);
            g.div(b, s)
        }, (0.2, 2.0)),
        ("clamp", |g, a, b| {
            let s = g.clamp(a, -1.0, 1.0);
            g.mul(s, b)
        }, (-2.0, 2.0)),
        ("l2_normalize", |g, a, b| {
            let s = g.l2_normalize_rows(a);
            g.mul(s, b)
        }, (-2.0, 2.0)),
    ];
    for (name, build, (lo, hi)) in cases {
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let mut s = Stream::new(1000 + trial, 0);
            let mut g = Graph::new();
            let a = g.param("a", 2, 3);
            let b = g.param("b", 2, 3);
            let out = build(&mut g, a, b);
            let w = rand_tensor(&mut s, g.rows(out), g.cols(out), -1.0, 1.0);
            let wc = g.constant(w);
            let prod = g.mul(out, wc);
            let y = g.sum_all(prod);
            let bnd = bind(&[("a", rand_tensor(&mut s, 2, 3, lo, hi)), ("b", rand_tensor(&mut s, 2, 3, lo, hi))]);
            let rep = finite_diff_check(&g, &bnd, y, 1e-5).unwrap();
            worst = worst.max(rep.max_rel_err());
        }
        assert!(worst < 1e-4, "{}: max rel err {}", name, worst);
    }
}
