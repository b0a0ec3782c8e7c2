use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, SubDataset};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::seeded_rng;

/// A replayed sample with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub sample: Sample,
    /// Zero-based stage index of the sub-dataset the sample came from.
    pub source_task: usize,
    /// True-label probability under the model that selected it; `None` for
    /// uniformly drawn entries.
    pub probability: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    /// Sorted by `(source_task, sample.id)`.
    pub entries: Vec<MemoryEntry>,
}

impl MemoryBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn from_entries(mut entries: Vec<MemoryEntry>) -> Self {
        entries.sort_by_key(|e| (e.source_task, e.sample.id));
        Self { entries }
    }
}

/// `⌈γ·n⌉`, treating products within 1e-9 of an integer as that integer so
/// that e.g. `0.1 · 30` keeps 3 samples rather than 4.
pub fn retained_count(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!("store ratio must lie in [0, 1], got {gamma}")))
    }
}

/// Indices of the `⌈γ·n⌉` smallest probabilities, ties broken by ascending
/// id, together with the threshold `β` (the largest retained probability).
pub fn lowest_probability_indices(probabilities: &[f64], ids: &[u64], gamma: f64) -> (Vec<usize>, Option<f64>) {
    let k = retained_count(gamma, probabilities.len());
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[a]
            .total_cmp(&probabilities[b])
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(k);
    let beta = order.last().map(|&i| probabilities[i]);
    (order, beta)
}

/// Selects the `⌈γ·|prior|⌉` samples of `prior` whose true label the class
/// head currently finds least likely.
pub fn select_memory(
    state: &ModelState,
    prior: &SubDataset,
    gamma: f64,
    source_task: usize,
) -> Result<Vec<MemoryEntry>> {
    check_gamma(gamma)?;
    if retained_count(gamma, prior.len()) == 0 {
        return Ok(Vec::new());
    }
    let refs: Vec<&Sample> = prior.samples.iter().collect();
    let probs = state.true_label_probabilities(&refs)?;
    let ids: Vec<u64> = prior.samples.iter().map(|s| s.id).collect();
    let (chosen, _) = lowest_probability_indices(&probs, &ids, gamma);
    let mut entries: Vec<MemoryEntry> = chosen
        .into_iter()
        .map(|i| MemoryEntry {
            sample: prior.samples[i].clone(),
            source_task,
            probability: Some(probs[i]),
        })
        .collect();
    entries.sort_by_key(|e| e.sample.id);
    Ok(entries)
}

/// Memory for stage `t` (1-based): the union of [`select_memory`] over every
/// earlier stage's sub-dataset, scored by the current model.
pub fn build_memory(state: &ModelState, stages: &[&SubDataset], t: usize, gamma: f64) -> Result<MemoryBuffer> {
    if t < 2 {
        return Err(Error::Usage(format!("memory is built from stage 2 on, got stage {t}")));
    }
    if stages.len() < t - 1 {
        return Err(Error::Usage(format!(
            "stage {t} needs {} earlier sub-datasets, got {}",
            t - 1,
            stages.len()
        )));
    }
    let mut entries = Vec::new();
    for (r, prior) in stages[..t - 1].iter().enumerate() {
        entries.extend(select_memory(state, prior, gamma, r)?);
    }
    Ok(MemoryBuffer::from_entries(entries))
}

/// Experience-replay memory: a uniform seeded draw of `⌈γ·|D_r|⌉` samples
/// from each earlier sub-dataset. The draw for task `r` depends only on
/// `(seed, r)`, so a task's replay set is the same at every later stage.
pub fn random_memory(stages: &[&SubDataset], t: usize, gamma: f64, seed: u64) -> Result<MemoryBuffer> {
    check_gamma(gamma)?;
    if t < 2 {
        return Err(Error::Usage(format!("memory is built from stage 2 on, got stage {t}")));
    }
    let mut entries = Vec::new();
    for (r, prior) in stages[..t - 1].iter().enumerate() {
        let k = retained_count(gamma, prior.len());
        if k == 0 {
            continue;
        }
        let mut rng = seeded_rng(seed, 0x6d65_6d00 + r as u64);
        let mut picked = sample_indices(&mut rng, prior.len(), k).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|i| MemoryEntry {
            sample: prior.samples[i].clone(),
            source_task: r,
            probability: None,
        }));
    }
    Ok(MemoryBuffer::from_entries(entries))
}
