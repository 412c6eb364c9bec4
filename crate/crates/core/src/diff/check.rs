use alloc::string::String;
use alloc::vec::Vec;

use super::exec::{backward, forward};
use super::graph::{Graph, NodeId};
use super::TensorMap;
use crate::error::{Error, Result};

/// Worst analytic-vs-numeric disagreement for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub numel: usize,
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub h: f64,
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    /// Name and error of the worst parameter, `None` for an empty report.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|p| (p.name.as_str(), p.max_rel_err))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + libm::fabs(numeric)).max(1e-8)
}

/// Compare reverse-mode gradients of the scalar `seed` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time, for every
/// learnable leaf of `graph`.
pub fn finite_diff_check(graph: &Graph, bindings: &TensorMap, seed: NodeId, h: f64) -> Result<GradReport> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(alloc::format!("step {} outside [1e-6, 1e-3]", h)));
    }
    let eval = forward(graph, bindings)?;
    let analytic = backward(graph, &eval, seed)?;
    let mut work = bindings.clone();
    let mut params = Vec::new();
    for name in graph.param_names() {
        let grad = &analytic[&name];
        let numel = grad.len();
        let mut worst = 0.0f64;
        for k in 0..numel {
            let orig = work[&name].data()[k];
            work.get_mut(&name).unwrap().data_mut()[k] = orig + h;
            let up = forward(graph, &work)?.value(seed).item();
            work.get_mut(&name).unwrap().data_mut()[k] = orig - h;
            let down = forward(graph, &work)?.value(seed).item();
            work.get_mut(&name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
        params.push(ParamError {
            name,
            max_rel_err: worst,
            numel,
        });
    }
    Ok(GradReport { h, params })
}
