use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::Error;

/// Additive fill used by [`Op::MaskedFill`]; large enough to zero a softmax entry
/// while keeping every gradient finite.
pub const MASK_FILL: f64 = -1e9;

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Primitive operations. Binary elementwise ops broadcast an operand whose
/// dimension is 1 along either axis.
#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Concat(Vec<NodeId>, Axis),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    /// Softmax over the last axis (each row).
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Mean(NodeId, Axis),
    Sum(NodeId, Axis),
    /// Per-row normalization to zero mean and unit variance, no affine.
    LayerNorm(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Adds [`MASK_FILL`] wherever the mask is set (mask is row-major, same size).
    MaskedFill(NodeId, Vec<bool>),
    /// Replaces entries with `|x| < eps` by `sign(x) * eps`, `sign(0) = +1`.
    SignSafe(NodeId, f64),
    /// Clips entries to `[lo, hi]`; the gradient is zero outside.
    Clamp(NodeId, f64, f64),
    /// Divides each row by its Euclidean norm.
    L2NormalizeRows(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::LayerNorm(..) => "layer_norm",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MaskedFill(..) => "masked_fill",
            Op::SignSafe(..) => "sign_safe",
            Op::Clamp(..) => "clamp",
            Op::L2NormalizeRows(_) => "l2_normalize",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub rows: usize,
    pub cols: usize,
}

/// A differentiable computation recorded in topological order.
///
/// Builder methods infer shapes eagerly. A shape error does not abort
/// construction; the first one is remembered and reported by `forward`, naming
/// the offending node.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) outputs: BTreeMap<String, NodeId>,
    pub(crate) leaves: BTreeMap<String, NodeId>,
    pub(crate) error: Option<Error>,
    /// When set, `forward` rejects non-finite intermediates and literal division
    /// by zero.
    pub checked: bool,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            checked: true,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn dims(&self, id: NodeId) -> [usize; 2] {
        let n = &self.nodes[id.0];
        [n.rows, n.cols]
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn error(&self) -> Option<&Error> {
        self.error.as_ref()
    }

    /// Names of the learnable leaves, in creation order.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<(usize, String)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((i, name.clone())),
                _ => None,
            })
            .collect();
        v.sort();
        v.into_iter().map(|(_, n)| n).collect()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &String> {
        self.outputs.keys()
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Register `node` under a name so `forward` reports it.
    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    fn fail(&mut self, op: &'static str, detail: String) {
        if self.error.is_none() {
            self.error = Some(Error::ShapeMismatch {
                node: self.nodes.len(),
                op,
                detail,
            });
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            rows: rows.max(1),
            cols: cols.max(1),
        });
        id
    }

    fn leaf(&mut self, name: &str, rows: usize, cols: usize, learnable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            let n = &self.nodes[id.0];
            if (n.rows, n.cols) != (rows, cols) {
                self.fail(
                    "leaf",
                    format!("`{}` redeclared as {}x{} (was {}x{})", name, rows, cols, n.rows, n.cols),
                );
            }
            return id;
        }
        let op = if learnable {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, rows, cols);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Named input leaf bound at evaluation time. Repeated names share one node.
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.leaf(name, rows, cols, false)
    }

    /// Named learnable leaf. Repeated names share one node.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.leaf(name, rows, cols, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        if t.rank() != 2 {
            self.fail("const", format!("rank {} tensor", t.rank()));
        }
        let (r, c) = (t.rows(), t.cols());
        self.push(Op::Const(t), r, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let [m, k] = self.dims(a);
        let [k2, n] = self.dims(b);
        if k != k2 {
            self.fail("matmul", format!("{}x{} * {}x{}", m, k, k2, n));
        }
        self.push(Op::MatMul(a, b), m, n)
    }

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId) -> NodeId {
        let [ar, ac] = self.dims(a);
        let [br, bc] = self.dims(b);
        match (broadcast_dim(ar, br), broadcast_dim(ac, bc)) {
            (Some(r), Some(c)) => self.push(op, r, c),
            _ => {
                self.fail(name, format!("{}x{} vs {}x{}", ar, ac, br, bc));
                self.push(op, ar, ac)
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add(a, b), "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub(a, b), "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul(a, b), "mul", a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div(a, b), "div", a, b)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        if parts.is_empty() {
            self.fail("concat", "no inputs".into());
            return self.push(Op::Concat(Vec::new(), axis), 1, 1);
        }
        let [r0, c0] = self.dims(parts[0]);
        let (mut rows, mut cols) = (0, 0);
        for &p in parts {
            let [r, c] = self.dims(p);
            match axis {
                Axis::Rows => {
                    if c != c0 {
                        self.fail("concat", format!("row-stack of widths {} and {}", c0, c));
                    }
                    rows += r;
                    cols = c0;
                }
                Axis::Cols => {
                    if r != r0 {
                        self.fail("concat", format!("column-join of heights {} and {}", r0, r));
                    }
                    cols += c;
                    rows = r0;
                }
            }
        }
        self.push(Op::Concat(parts.to_vec(), axis), rows, cols)
    }

    pub fn slice(&mut self, input: NodeId, axis: Axis, start: usize, len: usize) -> NodeId {
        let [r, c] = self.dims(input);
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > extent {
            self.fail("slice", format!("[{}, {}) of extent {}", start, start + len, extent));
        }
        let (rows, cols) = match axis {
            Axis::Rows => (len, c),
            Axis::Cols => (r, len),
        };
        self.push(
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            rows,
            cols,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.dims(a);
        self.push(Op::Transpose(a), c, r)
    }

    /// Row-major reshape to `rows x cols`.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let [r, c] = self.dims(a);
        if r * c != rows * cols {
            self.fail("reshape", format!("{}x{} into {}x{}", r, c, rows, cols));
        }
        self.push(Op::Reshape(a), rows, cols)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let [r, c] = self.dims(a);
        self.push(op, r, c)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softmax(a), a)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::LogSoftmax(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.unary(Op::LayerNorm(a, eps), a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        self.unary(Op::AddScalar(a, value), a)
    }

    pub fn masked_fill(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let [r, c] = self.dims(a);
        if mask.len() != r * c {
            self.fail("masked_fill", format!("mask of {} for {}x{}", mask.len(), r, c));
        }
        self.push(Op::MaskedFill(a, mask), r, c)
    }

    pub fn sign_safe(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.unary(Op::SignSafe(a, eps), a)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp(a, lo, hi), a)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::L2NormalizeRows(a), a)
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let [r, c] = self.dims(a);
        match axis {
            Axis::Rows => self.push(Op::Mean(a, axis), 1, c),
            Axis::Cols => self.push(Op::Mean(a, axis), r, 1),
        }
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let [r, c] = self.dims(a);
        match axis {
            Axis::Rows => self.push(Op::Sum(a, axis), 1, c),
            Axis::Cols => self.push(Op::Sum(a, axis), r, 1),
        }
    }

    /// Sum of every entry as a `1 x 1` node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.sum(a, Axis::Rows);
        self.sum(s, Axis::Cols)
    }

    /// Mean of every entry as a `1 x 1` node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let s = self.mean(a, Axis::Rows);
        self.mean(s, Axis::Cols)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Divide `a` by the sign-safe guarded `b`.
    pub fn safe_div(&mut self, a: NodeId, b: NodeId, eps: f64) -> NodeId {
        let guarded = self.sign_safe(b, eps);
        self.div(a, guarded)
    }
}
