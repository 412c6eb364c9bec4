//! Stratified train/validation/test splits and repeated stratified k-fold.
//!
//! Labels are single binary classes, so stratification reduces to allocating
//! each class proportionally.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{Stream, STREAM_SPLIT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices of each stratum in ascending order, keyed by stratum.
fn by_class(strata: &[i64]) -> BTreeMap<i64, Vec<usize>> {
    let mut m: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in strata.iter().enumerate() {
        m.entry(c).or_default().push(i);
    }
    m
}

/// Split `n` into parts proportional to `ratio` by largest remainder; ties go
/// to the earlier part.
pub fn largest_remainder(n: usize, ratio: &[usize]) -> Vec<usize> {
    let total: usize = ratio.iter().sum();
    let mut parts: Vec<usize> = ratio.iter().map(|&r| n * r / total).collect();
    let mut rem: Vec<(usize, usize)> = ratio.iter().enumerate().map(|(i, &r)| (n * r % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - parts.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        parts[i] += 1;
    }
    parts
}

/// Shuffle each stratum and cut it by `ratio` (train:val:test).
pub fn stratified_split(strata: &[i64], ratio: [usize; 3], seed: u64) -> Result<Split> {
    let needed: usize = ratio.iter().sum();
    let mut rng = Stream::new(seed, STREAM_SPLIT);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in by_class(strata) {
        if idx.len() < needed {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
                needed,
            });
        }
        rng.shuffle(&mut idx);
        let parts = largest_remainder(idx.len(), &ratio);
        let (a, rest) = idx.split_at(parts[0]);
        let (b, c) = rest.split_at(parts[1]);
        split.train.extend_from_slice(a);
        split.val.extend_from_slice(b);
        split.test.extend_from_slice(c);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// `repeats` rounds of stratified `k`-fold. Within each round every class is
/// shuffled and dealt round-robin to the folds with one counter shared across
/// classes, which keeps fold sizes within one of each other. Each training
/// part then holds out `val_frac` of every class for validation.
pub fn repeated_kfold(strata: &[i64], k: usize, repeats: usize, val_frac: f64, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidInput(alloc::format!("k-fold needs k >= 2, got {}", k)));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidInput(alloc::format!("validation fraction {} outside [0, 1)", val_frac)));
    }
    let classes = by_class(strata);
    for (&class, idx) in &classes {
        if idx.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
                needed: k,
            });
        }
    }
    let mut rng = Stream::new(seed, STREAM_SPLIT + 1);
    let mut out = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let mut assign = alloc::vec![0usize; strata.len()];
        let mut counter = 0;
        let mut shuffled = Vec::new();
        for idx in classes.values() {
            let mut idx = idx.clone();
            rng.shuffle(&mut idx);
            for &i in &idx {
                assign[i] = counter % k;
                counter += 1;
            }
            shuffled.push(idx);
        }
        for fold in 0..k {
            let test: Vec<usize> = (0..strata.len()).filter(|&i| assign[i] == fold).collect();
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for idx in &shuffled {
                let pool: Vec<usize> = idx.iter().copied().filter(|&i| assign[i] != fold).collect();
                let n_val = libm::round(val_frac * pool.len() as f64) as usize;
                val.extend_from_slice(&pool[..n_val]);
                train.extend_from_slice(&pool[n_val..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            out.push(Fold {
                repeat,
                fold,
                train,
                val,
                test,
            });
        }
    }
    Ok(out)
}
