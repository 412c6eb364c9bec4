use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Axis, Graph, NodeId, Op, MASK_FILL};
use super::tensor::Tensor;
use super::TensorMap;
use crate::error::{Error, Result};

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        self.outputs
            .get(name)
            .map(|id| &self.values[id.0])
            .ok_or_else(|| Error::UnknownOutput(name.into()))
    }

    /// All registered outputs by name.
    pub fn outputs(&self) -> TensorMap {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone()))
            .collect()
    }
}

fn bcast_index(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let r = if rows == 1 { 0 } else { i };
    let c = if cols == 1 { 0 } else { j };
    r * cols + c
}

fn binary_forward(a: &Tensor, b: &Tensor, rows: usize, cols: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [ar, ac] = a.dims();
    let [br, bc] = b.dims();
    if ar == br && ac == bc {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(rows, cols, data);
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(f(ad[bcast_index(i, j, ar, ac)], bd[bcast_index(i, j, br, bc)]));
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Sum a full-size gradient back down to a (possibly broadcast) operand shape.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    let [gr, gc] = grad.dims();
    if gr == rows && gc == cols {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    let od = out.data_mut();
    for i in 0..gr {
        for j in 0..gc {
            od[bcast_index(i, j, rows, cols)] += grad.data()[i * gc + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let [r, c] = x.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = libm::exp(v - m);
            s += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= s;
        }
    }
    Tensor::matrix(r, c, out)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let [r, c] = x.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
        let lse = m + libm::log(s);
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::matrix(r, c, out)
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let [r, c] = x.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::matrix(r, c, out)
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| libm::sqrt(x.row_slice(i).iter().map(|v| v * v).sum::<f64>()))
        .collect()
}

fn check_finite(g: &Graph, idx: usize, t: &Tensor) -> Result<()> {
    if g.checked && !t.is_finite() {
        return Err(Error::NonFinite {
            node: idx,
            op: g.nodes[idx].op.name(),
        });
    }
    Ok(())
}

/// Evaluate every node of `graph` with leaves taken from `bindings`.
pub fn forward(graph: &Graph, bindings: &TensorMap) -> Result<Evaluation> {
    if let Some(e) = &graph.error {
        return Err(e.clone());
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let (rows, cols) = (node.rows, node.cols);
        let v = |id: &NodeId| -> &Tensor { &values[id.0] };
        let out = match &node.op {
            Op::Input(name) | Op::Param(name) => {
                let t = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.rank() != 2 || t.dims() != [rows, cols] {
                    return Err(Error::BindingShape {
                        name: name.clone(),
                        expected: [rows, cols],
                        got: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Add(a, b) => binary_forward(v(a), v(b), rows, cols, |x, y| x + y),
            Op::Sub(a, b) => binary_forward(v(a), v(b), rows, cols, |x, y| x - y),
            Op::Mul(a, b) => binary_forward(v(a), v(b), rows, cols, |x, y| x * y),
            Op::Div(a, b) => {
                if graph.checked && v(b).data().iter().any(|&x| x == 0.0) {
                    return Err(Error::DivisionByZero { node: idx });
                }
                binary_forward(v(a), v(b), rows, cols, |x, y| x / y)
            }
            Op::Concat(parts, axis) => {
                let mut data = Vec::with_capacity(rows * cols);
                match axis {
                    Axis::Rows => {
                        for p in parts {
                            data.extend_from_slice(v(p).data());
                        }
                    }
                    Axis::Cols => {
                        for i in 0..rows {
                            for p in parts {
                                data.extend_from_slice(v(p).row_slice(i));
                            }
                        }
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let x = v(input);
                let mut data = Vec::with_capacity(rows * cols);
                match axis {
                    Axis::Rows => {
                        let c = x.cols();
                        data.extend_from_slice(&x.data()[start * c..(start + len) * c]);
                    }
                    Axis::Cols => {
                        for i in 0..rows {
                            data.extend_from_slice(&x.row_slice(i)[*start..start + len]);
                        }
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            Op::Transpose(a) => v(a).transpose(),
            Op::Reshape(a) => Tensor::matrix(rows, cols, v(a).data().to_vec()),
            Op::Softmax(a) => softmax_rows(v(a)),
            Op::LogSoftmax(a) => log_softmax_rows(v(a)),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp(a) => v(a).map(libm::exp),
            Op::Log(a) => v(a).map(libm::log),
            Op::Mean(a, axis) | Op::Sum(a, axis) => {
                let x = v(a);
                let [r, c] = x.dims();
                let is_mean = matches!(node.op, Op::Mean(..));
                match axis {
                    Axis::Rows => {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for (o, val) in out.iter_mut().zip(x.row_slice(i)) {
                                *o += val;
                            }
                        }
                        if is_mean {
                            out.iter_mut().for_each(|o| *o /= r as f64);
                        }
                        Tensor::matrix(1, c, out)
                    }
                    Axis::Cols => {
                        let out = (0..r)
                            .map(|i| {
                                let s: f64 = x.row_slice(i).iter().sum();
                                if is_mean {
                                    s / c as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Tensor::matrix(r, 1, out)
                    }
                }
            }
            Op::LayerNorm(a, eps) => layer_norm_rows(v(a), *eps),
            Op::Scale(a, f) => v(a).map(|x| x * f),
            Op::AddScalar(a, s) => v(a).map(|x| x + s),
            Op::MaskedFill(a, mask) => {
                let mut t = v(a).clone();
                for (x, &m) in t.data_mut().iter_mut().zip(mask) {
                    if m {
                        *x += MASK_FILL;
                    }
                }
                t
            }
            Op::SignSafe(a, eps) => v(a).map(|x| {
                if libm::fabs(x) < *eps {
                    if x < 0.0 {
                        -eps
                    } else {
                        *eps
                    }
                } else {
                    x
                }
            }),
            Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
            Op::L2NormalizeRows(a) => {
                let x = v(a);
                let norms = row_norms(x);
                if norms.iter().any(|&n| n == 0.0) {
                    return Err(Error::DegenerateEmbedding);
                }
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, val)| val / norms[k / c])
                    .collect();
                Tensor::matrix(rows, cols, data)
            }
        };
        check_finite(graph, idx, &out)?;
        values.push(out);
    }
    Ok(Evaluation {
        values,
        outputs: graph.outputs.clone(),
    })
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse-mode gradients of the scalar node `seed` with respect to every
/// `Param` leaf in the graph. Parameters that do not influence `seed` get an
/// exact zero tensor.
pub fn backward(graph: &Graph, eval: &Evaluation, seed: NodeId) -> Result<TensorMap> {
    let seed_node = &graph.nodes[seed.0];
    if seed_node.rows != 1 || seed_node.cols != 1 {
        return Err(Error::NonScalarSeed {
            node: seed.0,
            rows: seed_node.rows,
            cols: seed_node.cols,
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[seed.0] = Some(Tensor::scalar(1.0));
    for idx in (0..=seed.0).rev() {
        let Some(dy) = grads[idx].take() else {
            continue;
        };
        let node = &graph.nodes[idx];
        let y = &eval.values[idx];
        let val = |id: &NodeId| &eval.values[id.0];
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {
                grads[idx] = Some(dy);
                continue;
            }
            Op::MatMul(a, b) => {
                let da = dy.matmul(&val(b).transpose());
                let db = val(a).transpose().matmul(&dy);
                accumulate(&mut grads, *a, da);
                accumulate(&mut grads, *b, db);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let [ar, ac] = val(a).dims();
                let [br, bc] = val(b).dims();
                let da = reduce_to(&dy, ar, ac);
                let mut db = reduce_to(&dy, br, bc);
                if matches!(node.op, Op::Sub(..)) {
                    db = db.map(|x| -x);
                }
                accumulate(&mut grads, *a, da);
                accumulate(&mut grads, *b, db);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let [ar, ac] = ta.dims();
                let [br, bc] = tb.dims();
                let is_mul = matches!(node.op, Op::Mul(..));
                let (rows, cols) = (node.rows, node.cols);
                let mut fa = Tensor::zeros(rows, cols);
                let mut fb = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let x = ta.data()[bcast_index(i, j, ar, ac)];
                        let z = tb.data()[bcast_index(i, j, br, bc)];
                        let g = dy.data()[i * cols + j];
                        if is_mul {
                            fa.data_mut()[i * cols + j] = g * z;
                            fb.data_mut()[i * cols + j] = g * x;
                        } else {
                            fa.data_mut()[i * cols + j] = g / z;
                            fb.data_mut()[i * cols + j] = -g * x / (z * z);
                        }
                    }
                }
                accumulate(&mut grads, *a, reduce_to(&fa, ar, ac));
                accumulate(&mut grads, *b, reduce_to(&fb, br, bc));
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let [r, c] = val(p).dims();
                    let mut g = Tensor::zeros(r, c);
                    match axis {
                        Axis::Rows => {
                            let w = dy.cols();
                            g.data_mut()
                                .copy_from_slice(&dy.data()[offset * w..(offset + r) * w]);
                            offset += r;
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                let src = &dy.row_slice(i)[offset..offset + c];
                                g.data_mut()[i * c..(i + 1) * c].copy_from_slice(src);
                            }
                            offset += c;
                        }
                    }
                    accumulate(&mut grads, *p, g);
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let [r, c] = val(input).dims();
                let mut g = Tensor::zeros(r, c);
                match axis {
                    Axis::Rows => {
                        g.data_mut()[start * c..(start + len) * c].copy_from_slice(dy.data());
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            g.data_mut()[i * c + start..i * c + start + len]
                                .copy_from_slice(dy.row_slice(i));
                        }
                    }
                }
                accumulate(&mut grads, *input, g);
            }
            Op::Transpose(a) => accumulate(&mut grads, *a, dy.transpose()),
            Op::Reshape(a) => {
                let [r, c] = val(a).dims();
                accumulate(&mut grads, *a, Tensor::matrix(r, c, dy.into_data()));
            }
            Op::Softmax(a) => {
                let [r, c] = y.dims();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let dr = dy.row_slice(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        g.data_mut()[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                accumulate(&mut grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let [r, c] = y.dims();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let dr = dy.row_slice(i);
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        g.data_mut()[i * c + j] = dr[j] - libm::exp(yr[j]) * s;
                    }
                }
                accumulate(&mut grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let data = dy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::Relu(a) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::Exp(a) => {
                let data = dy.data().iter().zip(y.data()).map(|(g, e)| g * e).collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::Log(a) => {
                let data = dy.data().iter().zip(val(a).data()).map(|(g, x)| g / x).collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::Mean(a, axis) | Op::Sum(a, axis) => {
                let [r, c] = val(a).dims();
                let is_mean = matches!(node.op, Op::Mean(..));
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let (src, n) = match axis {
                            Axis::Rows => (dy.data()[j], r),
                            Axis::Cols => (dy.data()[i], c),
                        };
                        g.data_mut()[i * c + j] = if is_mean { src / n as f64 } else { src };
                    }
                }
                accumulate(&mut grads, *a, g);
            }
            Op::LayerNorm(a, eps) => {
                let x = val(a);
                let [r, c] = x.dims();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let xr = x.row_slice(i);
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let yr = y.row_slice(i);
                    let dr = dy.row_slice(i);
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g.data_mut()[i * c + j] = inv * (dr[j] - mean_d - yr[j] * mean_dy);
                    }
                }
                accumulate(&mut grads, *a, g);
            }
            Op::Scale(a, f) => accumulate(&mut grads, *a, dy.map(|x| x * f)),
            Op::AddScalar(a, _) | Op::MaskedFill(a, _) => accumulate(&mut grads, *a, dy),
            Op::SignSafe(a, eps) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| if libm::fabs(*x) < *eps { 0.0 } else { *g })
                    .collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::Clamp(a, lo, hi) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| if *x < *lo || *x > *hi { 0.0 } else { *g })
                    .collect();
                accumulate(&mut grads, *a, Tensor::matrix(node.rows, node.cols, data));
            }
            Op::L2NormalizeRows(a) => {
                let x = val(a);
                let norms = row_norms(x);
                let [r, c] = x.dims();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let dr = dy.row_slice(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        g.data_mut()[i * c + j] = (dr[j] - yr[j] * dot) / norms[i];
                    }
                }
                accumulate(&mut grads, *a, g);
            }
        }
    }
    let mut out = TensorMap::new();
    for (idx, node) in graph.nodes.iter().enumerate() {
        if let Op::Param(name) = &node.op {
            let g = match idx <= seed.0 {
                true => grads[idx].take(),
                false => None,
            };
            out.insert(
                name.clone(),
                g.unwrap_or_else(|| Tensor::zeros(node.rows, node.cols)),
            );
        }
    }
    Ok(out)
}
