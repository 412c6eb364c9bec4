//! Learnable parameter declarations and initialization.

use alloc::string::String;
use alloc::vec::Vec;

use crate::diff::{Tensor, TensorMap};
use crate::rng::Stream;

/// Initialization rule for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with mean 0 and the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

/// Default weight scale.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }

    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, rows, cols, Init::Normal(INIT_STD))
    }

    pub fn bias(name: impl Into<String>, cols: usize) -> Self {
        Self::new(name, 1, cols, Init::Zeros)
    }
}

/// Specs for a layer-norm gain/bias pair named `{prefix}.g` / `{prefix}.b`.
pub fn layer_norm_specs(prefix: &str, d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(alloc::format!("{}.g", prefix), 1, d, Init::Ones),
        ParamSpec::bias(alloc::format!("{}.b", prefix), d),
    ]
}

/// Draw every parameter in declaration order from one stream.
pub fn initialize(specs: &[ParamSpec], rng: &mut Stream) -> TensorMap {
    let mut out = TensorMap::new();
    for s in specs {
        let n = s.rows * s.cols;
        let data: Vec<f64> = match s.init {
            Init::Normal(std) => (0..n).map(|_| std * rng.normal()).collect(),
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
        };
        out.insert(s.name.clone(), Tensor::matrix(s.rows, s.cols, data));
    }
    out
}

/// Total number of scalar parameters.
pub fn count(params: &TensorMap) -> usize {
    params.values().map(|t| t.len()).sum()
}
