//! Minimal reverse-mode differentiation over rank-2 `f64` tensors.
//!
//! A [`Graph`] is built once per batch, evaluated with [`forward`] against a
//! [`TensorMap`] of leaf bindings, and differentiated with [`backward`]. The
//! same graph can be re-evaluated with perturbed bindings, which is what
//! [`finite_diff_check`] does.

mod check;
mod exec;
mod graph;
mod tensor;

use alloc::collections::BTreeMap;
use alloc::string::String;

pub use check::{finite_diff_check, relative_error, GradReport, ParamError};
pub use exec::{backward, forward, Evaluation};
pub use graph::{Axis, Graph, Node, NodeId, Op, MASK_FILL};
pub use tensor::Tensor;

/// Named tensors, ordered by name.
pub type TensorMap = BTreeMap<String, Tensor>;

#[cfg(test)]
mod tests;
