//! Independent reference implementations used by the oracle tests.

use std::collections::{BTreeMap, BTreeSet};

use debias_core::corpus::{stratum_index, Sample, SubDataset};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `⌈γ·n⌉` by search rather than by rounding arithmetic.
pub fn memory_size(gamma: f64, n: usize) -> usize {
    (0..=n).find(|&k| k as f64 >= gamma * n as f64 - 1e-9).unwrap_or(n)
}

/// Sample `i` is kept iff fewer than `k` samples precede it in the order
/// (probability, id). Returns the kept indices in ascending order.
pub fn brute_force_memory(probs: &[f64], ids: &[u64], gamma: f64) -> Vec<usize> {
    let k = memory_size(gamma, probs.len());
    (0..probs.len())
        .filter(|&i| {
            let before = (0..probs.len())
                .filter(|&j| probs[j] < probs[i] || (probs[j] == probs[i] && ids[j] < ids[i]))
                .count();
            before < k
        })
        .collect()
}

/// A probability vector; about half the instances draw from a coarse grid
/// so that ties are common.
pub fn random_probabilities(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u64>, f64) {
    let n = rng.gen_range(0..60);
    let coarse = rng.gen_bool(0.5);
    let probs = (0..n)
        .map(|_| {
            if coarse {
                rng.gen_range(0..5) as f64 / 4.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    // Shuffle ids so that index order and id order differ.
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let gamma = match rng.gen_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        2 => rng.gen_range(1..10) as f64 / 10.0,
        _ => rng.gen::<f64>(),
    };
    (probs, ids, gamma)
}

/// Two-sided exact p by enumerating all `2ⁿ` sign patterns over naive
/// mid-ranks of `|d|`.
pub fn enumerated_wilcoxon(diffs: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let less = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_of = |plus: &dyn Fn(usize) -> bool| {
        let wp: f64 = (0..n).filter(|&i| plus(i)).map(|i| ranks[i]).sum();
        wp.min(total - wp)
    };
    let observed = w_of(&|i| d[i] > 0.0);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        if w_of(&|i| mask >> i & 1 == 1) <= observed + 1e-9 {
            extreme += 1;
        }
    }
    (observed, extreme as f64 / (1u64 << n) as f64)
}

/// A corpus with random labels and groups and unique ids.
pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| Sample {
            id: 1000 + i * 3,
            tokens: vec![rng.gen_range(1..50)],
            label: rng.gen_range(0..2),
            groups: [
                rng.gen_range(0..2),
                rng.gen_range(0..2),
                rng.gen_range(0..2),
                rng.gen_range(0..2),
            ],
        })
        .collect()
}

/// Disjointness, exact union and per-stratum spread of a split. Returns the
/// first violated property.
pub fn check_split(corpus: &[Sample], subsets: &[SubDataset]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for d in subsets {
        for s in &d.samples {
            if !seen.insert(s.id) {
                return Err(format!("sample {} appears twice", s.id));
            }
        }
    }
    let all: BTreeSet<u64> = corpus.iter().map(|s| s.id).collect();
    if seen != all {
        return Err(format!("union has {} ids, corpus {}", seen.len(), all.len()));
    }
    let by_id: BTreeMap<u64, &Sample> = corpus.iter().map(|s| (s.id, s)).collect();
    for d in subsets {
        if d.samples.iter().any(|s| by_id[&s.id] != s) {
            return Err("a split sample differs from its source".into());
        }
    }
    for stratum in 0..32 {
        let counts: Vec<usize> = subsets
            .iter()
            .map(|d| d.samples.iter().filter(|s| stratum_index(s) == stratum).count())
            .collect();
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        if spread > 1 {
            return Err(format!("stratum {stratum} counts {counts:?}"));
        }
    }
    Ok(())
}
