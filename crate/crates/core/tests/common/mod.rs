#![allow(dead_code)]

use medfuse_core::diff::{Tensor, TensorMap};
use medfuse_core::params::ParamSpec;
use medfuse_core::rng::Stream;

pub fn rng(seed: u64) -> Stream {
    Stream::new(seed, 99)
}

pub fn randn(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect())
}

pub fn random_params(specs: &[ParamSpec], rng: &mut Stream, std: f64) -> TensorMap {
    specs
        .iter()
        .map(|s| (s.name.clone(), randn(rng, s.rows, s.cols, std)))
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn affine(a: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let mut out = naive_matmul(a, &rows(w));
    for r in &mut out {
        for (x, bias) in r.iter_mut().zip(b.data()) {
            *x += bias;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `softmax(q k^T / sqrt(d) + mask) v` one element at a time.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], blocked: Option<&dyn Fn(usize, usize) -> bool>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len() as f64;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
                match blocked {
                    Some(f) if f(i, j) => s - 1e9,
                    _ => s,
                }
            })
            .collect();
        let w = softmax(&logits);
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (x, y) in o.iter_mut().zip(vj) {
                *x += wj * y;
            }
        }
        out.push(o);
        weights.push(w);
    }
    (out, weights)
}

pub fn layer_norm(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    row.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn col_mean(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}
