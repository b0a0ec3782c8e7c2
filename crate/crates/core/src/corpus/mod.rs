//! Benchmark data: samples with four binary demographic attributes, a
//! seed-controlled synthetic generator with false-positive bias injection,
//! JSON Lines ingestion, the equal-proportion stratified splitter and
//! task-sequence enumeration.

mod featurize;
mod jsonl;
mod sequence;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use featurize::{fnv1a64, hash_featurize, MAX_FEATURES, NULL_TOKEN};
pub use jsonl::{load_jsonl, parse_jsonl, save_jsonl, write_jsonl};
pub use sequence::{enumerate_sequences, TaskSequence};
pub use split::{stratified_split, stratum_index, AttributeTable, SplitManifest, StratumCount};
pub use synth::{generate_corpus, generate_synthetic, BiasInjection, Corpus, CorpusManifest, SynthConfig};

/// Label value of non-hate samples.
pub const NON_HATE: usize = 0;
/// Label value of hate samples.
pub const HATE: usize = 1;

/// The four demographic attribute kinds, each with exactly two groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Age,
    Gender,
    Country,
    Ethnicity,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Age,
        Attribute::Gender,
        Attribute::Country,
        Attribute::Ethnicity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Attribute> {
        Self::ALL.get(index).copied()
    }

    /// Field name used in dataset files.
    pub fn key(self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Gender => "gender",
            Attribute::Country => "country",
            Attribute::Ethnicity => "ethnicity",
        }
    }

    /// Group names, indexed by group id.
    pub fn groups(self) -> [&'static str; 2] {
        match self {
            Attribute::Age => ["elder", "median"],
            Attribute::Gender => ["male", "female"],
            Attribute::Country => ["non-US", "US"],
            Attribute::Ethnicity => ["non-white", "white"],
        }
    }

    pub fn group_index(self, name: &str) -> Option<u8> {
        self.groups().iter().position(|g| *g == name).map(|i| i as u8)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attribute '{s}'")))
    }
}

/// One labeled text with its demographic groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// [`NON_HATE`] or [`HATE`].
    pub label: usize,
    /// Group id per attribute, indexed by [`Attribute::index`].
    pub groups: [u8; 4],
}

impl Sample {
    pub fn group(&self, attribute: Attribute) -> usize {
        self.groups[attribute.index()] as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Input(format!("sample {} has no tokens", self.id)));
        }
        if self.label > HATE {
            return Err(Error::Input(format!(
                "sample {} has label {}, expected 0 or 1",
                self.id, self.label
            )));
        }
        if let Some(g) = self.groups.iter().find(|&&g| g > 1) {
            return Err(Error::Input(format!(
                "sample {} has group id {g}, expected 0 or 1",
                self.id
            )));
        }
        Ok(())
    }
}

/// A partition of the training data whose single under-investigated bias
/// attribute is `focus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubDataset {
    pub focus: Attribute,
    pub samples: Vec<Sample>,
}

impl SubDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Largest token id plus one over a collection of samples.
pub fn vocab_extent<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> usize {
    samples
        .into_iter()
        .flat_map(|s| s.tokens.iter())
        .map(|&t| t as usize + 1)
        .max()
        .unwrap_or(1)
}
