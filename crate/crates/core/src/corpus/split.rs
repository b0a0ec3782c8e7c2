//! Equal-proportion division of a corpus into attribute sub-datasets.
//!
//! Samples are stratified jointly by label and all four attribute groups
//! (32 cells). Each cell is shuffled with the split seed and dealt
//! round-robin; the dealing pointer carries over from one cell to the next,
//! so the subsets also stay balanced in total size.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Attribute, Sample, SubDataset, HATE};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Joint stratum of a sample: `label * 16 + Σ group_a · 2^(3 − a)`.
pub fn stratum_index(sample: &Sample) -> usize {
    sample
        .groups
        .iter()
        .fold(sample.label, |acc, &g| acc * 2 + g as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub label: usize,
    pub groups: [u8; 4],
    pub total: usize,
    pub per_subset: Vec<usize>,
}

/// Counts per (attribute, group) and per label, keyed by the dataset-file
/// names, e.g. `"gender" -> {"male": 8850, "female": 14426}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub total: usize,
    pub attributes: BTreeMap<String, BTreeMap<String, usize>>,
    pub labels: BTreeMap<String, usize>,
}

impl AttributeTable {
    pub fn tally(samples: &[Sample]) -> Self {
        let mut table = AttributeTable {
            total: samples.len(),
            ..Default::default()
        };
        for a in Attribute::ALL {
            let counts = table.attributes.entry(a.key().to_string()).or_default();
            for g in a.groups() {
                counts.insert(g.to_string(), 0);
            }
        }
        table.labels.insert("non-hate".into(), 0);
        table.labels.insert("hate".into(), 0);
        for s in samples {
            for a in Attribute::ALL {
                let name = a.groups()[s.group(a)];
                *table
                    .attributes
                    .get_mut(a.key())
                    .and_then(|m| m.get_mut(name))
                    .expect("initialized above") += 1;
            }
            let label = if s.label == HATE { "hate" } else { "non-hate" };
            *table.labels.get_mut(label).expect("initialized above") += 1;
        }
        table
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub focuses: Vec<Attribute>,
    pub sizes: Vec<usize>,
    pub strata: Vec<StratumCount>,
    /// One attribute/label table per sub-dataset, in focus order.
    pub tables: Vec<AttributeTable>,
}

impl SplitManifest {
    pub fn describe(subsets: &[SubDataset], seed: u64) -> Self {
        let k = subsets.len();
        let mut strata: BTreeMap<usize, StratumCount> = BTreeMap::new();
        for (j, d) in subsets.iter().enumerate() {
            for s in &d.samples {
                let entry = strata.entry(stratum_index(s)).or_insert_with(|| StratumCount {
                    label: s.label,
                    groups: s.groups,
                    total: 0,
                    per_subset: vec![0; k],
                });
                entry.total += 1;
                entry.per_subset[j] += 1;
            }
        }
        SplitManifest {
            seed,
            focuses: subsets.iter().map(|d| d.focus).collect(),
            sizes: subsets.iter().map(SubDataset::len).collect(),
            strata: strata.into_values().collect(),
            tables: subsets.iter().map(|d| AttributeTable::tally(&d.samples)).collect(),
        }
    }
}

/// Splits `samples` into `focuses.len()` disjoint sub-datasets, sub-dataset
/// `i` taking `focuses[i]` as its focus attribute.
pub fn stratified_split(
    samples: &[Sample],
    k: usize,
    focuses: &[Attribute],
    seed: u64,
) -> Result<Vec<SubDataset>> {
    if k == 0 || k != focuses.len() {
        return Err(Error::Config(format!(
            "split needs one focus attribute per sub-dataset (k = {k}, {} focuses)",
            focuses.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Input("cannot split an empty corpus".into()));
    }
    let mut strata: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        strata.entry(stratum_index(s)).or_default().push(s);
    }
    let mut rng = seeded_rng(seed, 0);
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); k];
    let mut next = 0;
    for members in strata.values_mut() {
        members.sort_by_key(|s| s.id);
        members.shuffle(&mut rng);
        for s in members.iter() {
            buckets[next].push((*s).clone());
            next = (next + 1) % k;
        }
    }
    Ok(buckets
        .into_iter()
        .zip(focuses)
        .map(|(mut samples, &focus)| {
            samples.sort_by_key(|s| s.id);
            SubDataset { focus, samples }
        })
        .collect())
}
