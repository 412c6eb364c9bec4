//! Evaluation metrics: accuracy, ROC AUC, Harrell's C-index, LRAP, Recall@k,
//! the Kaplan-Meier estimator and percentile bootstrap intervals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{Stream, STREAM_BOOTSTRAP};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 7;
/// Redraws allowed per resample when the metric is undefined on it.
pub const RETRY_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub point: f64,
    pub ci: Option<(f64, f64)>,
    pub n: usize,
    pub resamples: usize,
    pub seed: u64,
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidInput("accuracy needs equal nonempty inputs".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn total_cmp(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// 1-based ranks in ascending order, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| total_cmp(&x[a], &x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// ROC AUC in Mann-Whitney form with half credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("auc needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let sum_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fenwick tree over score ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index over event-anchored pairs (`event_i`,
/// `t_i < t_j`): concordant when `score_i > score_j`, half credit for ties.
pub fn c_index(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = scores.len();
    if times.len() != n || events.len() != n {
        return Err(Error::InvalidInput("c-index inputs differ in length".into()));
    }
    // Dense score ranks for the tree.
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(total_cmp);
    sorted.dedup();
    let rank = |s: f64| sorted.partition_point(|&x| x < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total_cmp(&times[b], &times[a]));
    let mut tree = Fenwick(vec![0; sorted.len() + 1]);
    let mut inserted = 0u64;
    let (mut pairs, mut credit) = (0u64, 0u64); // credit counted in halves
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && times[order[j]] == times[order[i]] {
            j += 1;
        }
        // All later-time samples are in the tree; score this time group.
        for &k in &order[i..j] {
            if !events[k] {
                continue;
            }
            let r = rank(scores[k]);
            let lower = tree.below(r);
            let equal = tree.below(r + 1) - lower;
            pairs += inserted;
            credit += 2 * lower + equal;
        }
        for &k in &order[i..j] {
            tree.add(rank(scores[k]));
            inserted += 1;
        }
        i = j;
    }
    if pairs == 0 {
        return Err(Error::Undefined("no comparable pairs".into()));
    }
    Ok(credit as f64 / (2 * pairs) as f64)
}

fn check_similarity(sim: &Tensor, relevant: &[Vec<usize>]) -> Result<()> {
    if sim.rows() != relevant.len() {
        return Err(Error::InvalidInput(format!(
            "{} queries but {} relevance sets",
            sim.rows(),
            relevant.len()
        )));
    }
    for (q, set) in relevant.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::InvalidInput(format!("query {} has no relevant item", q)));
        }
        if set.iter().any(|&j| j >= sim.cols()) {
            return Err(Error::InvalidInput(format!("query {} names an item outside the gallery", q)));
        }
    }
    Ok(())
}

/// Label ranking average precision. Ranks are by descending similarity with
/// ties sharing their average rank, both overall and among relevant items.
pub fn lrap(sim: &Tensor, relevant: &[Vec<usize>]) -> Result<f64> {
    check_similarity(sim, relevant)?;
    let mut total = 0.0;
    for (q, set) in relevant.iter().enumerate() {
        let row = sim.row_slice(q);
        let avg_rank = |i: usize, pool: &mut dyn Iterator<Item = usize>| {
            let (mut above, mut tied) = (0usize, 0usize);
            for j in pool {
                if row[j] > row[i] {
                    above += 1;
                } else if row[j] == row[i] {
                    tied += 1;
                }
            }
            // `tied` counts `i` itself.
            above as f64 + (tied as f64 + 1.0) / 2.0
        };
        let mut s = 0.0;
        for &i in set {
            let overall = avg_rank(i, &mut (0..row.len()));
            let among = avg_rank(i, &mut set.iter().copied());
            s += among / overall;
        }
        total += s / set.len() as f64;
    }
    Ok(total / relevant.len() as f64)
}

/// Gallery order by descending similarity; equal scores keep index order.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| total_cmp(&row[b], &row[a]));
    idx
}

/// Fraction of queries with a relevant item among the top `k`.
pub fn recall_at_k(sim: &Tensor, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    check_similarity(sim, relevant)?;
    if k == 0 || k > sim.cols() {
        return Err(Error::InvalidInput(format!("k = {} outside [1, {}]", k, sim.cols())));
    }
    let hits = relevant
        .iter()
        .enumerate()
        .filter(|(q, set)| ranking(sim.row_slice(*q))[..k].iter().any(|i| set.contains(i)))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous step function `S(t)`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Product-limit estimator.
pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() || times.len() != events.len() {
        return Err(Error::InvalidInput("km needs equal nonempty inputs".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| total_cmp(&times[a], &times[b]));
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        deaths: Vec::new(),
    };
    let mut s = 1.0;
    let mut remaining = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += events[order[j]] as usize;
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(remaining);
            curve.deaths.push(d);
        }
        remaining -= j - i;
        i = j;
    }
    Ok(curve)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile 95% interval of `metric` over `resamples` draws of `n` indices
/// with replacement. Resample `r` uses its own stream, so results do not
/// depend on evaluation order. Draws where the metric is undefined are
/// redrawn up to [`RETRY_CAP`] times. The interval is widened to contain
/// `point` if percentile noise would exclude it.
pub fn bootstrap_ci<F>(n: usize, point: f64, metric: F, resamples: usize, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if resamples < 100 {
        return Err(Error::InvalidInput(format!("{} resamples, need at least 100", resamples)));
    }
    if n == 0 {
        return Err(Error::InvalidInput("bootstrap over empty data".into()));
    }
    let mut values = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; n];
    for r in 0..resamples {
        let mut rng = Stream::new(seed, STREAM_BOOTSTRAP + r as u64);
        let mut value = None;
        for _ in 0..=RETRY_CAP {
            for x in idx.iter_mut() {
                *x = rng.below(n);
            }
            match metric(&idx) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(Error::Undefined(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        values.push(value.ok_or(Error::RetryCapExceeded(RETRY_CAP))?);
    }
    values.sort_by(total_cmp);
    let lo = quantile(&values, 0.025).min(point);
    let hi = quantile(&values, 0.975).max(point);
    Ok((lo, hi))
}

/// Point estimate plus bootstrap interval over `n` indexable samples.
pub fn report_with_ci<F>(name: &str, n: usize, metric: F, resamples: usize, seed: u64) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let ci = bootstrap_ci(n, point, &metric, resamples, seed)?;
    Ok(MetricReport {
        name: name.into(),
        point,
        ci: Some(ci),
        n,
        resamples,
        seed,
    })
}
