//! Seed-controlled stand-in for the crowd-annotated tweet corpus.
//!
//! Every sample carries one marker token per attribute (drawn from the
//! markers of its group), a handful of "signal" slots that hold
//! hate-indicative tokens with a label-dependent probability, and neutral
//! filler. Two bias mechanisms act on training data, both scaled by each
//! [`BiasInjection`]'s strength:
//!
//! - association: the biased group is over-represented among hate samples
//!   (group marginals are preserved), so a classifier learns to read the
//!   group marker as evidence of hate and shows a higher false positive
//!   rate for that group on clean data;
//! - token injection: non-hate samples of the biased group get extra
//!   hate-indicative tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::split::AttributeTable;
use super::{Attribute, Sample, HATE, NON_HATE};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasInjection {
    pub attribute: Attribute,
    pub group: u8,
    /// Probability that a non-hate sample of this group gets injected tokens.
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Training samples; validation and test sizes follow below.
    pub samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub hate_rate: f64,
    /// Probability of group 0 for each attribute, indexed by [`Attribute::index`].
    pub group0_rate: [f64; 4],
    pub bias: Vec<BiasInjection>,
    pub neutral_vocab: usize,
    pub hate_vocab: usize,
    /// Marker tokens per (attribute, group).
    pub marker_vocab: usize,
    pub tokens_per_sample: usize,
    /// Slots that may hold a hate-indicative token.
    pub signal_slots: usize,
    /// Per-slot probability of a hate-indicative token in hate samples.
    pub hate_signal: f64,
    /// Per-slot probability of a hate-indicative token in non-hate samples.
    pub benign_signal: f64,
    /// Hate-indicative tokens added to an injected sample.
    pub injected_tokens: usize,
    /// Shift of a biased group's share towards hate samples, as a fraction
    /// of the remaining headroom, scaled by the entry's strength.
    pub association: f64,
    /// Apply bias injection to validation and test data as well.
    pub inject_eval: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            validation_samples: 2000,
            test_samples: 4000,
            hate_rate: 6250.0 / 23276.0,
            group0_rate: [
                10561.0 / 23276.0,
                8850.0 / 23276.0,
                7418.0 / 23276.0,
                15480.0 / 23276.0,
            ],
            bias: Attribute::ALL
                .into_iter()
                .map(|attribute| BiasInjection {
                    attribute,
                    group: 0,
                    strength: 0.5,
                })
                .collect(),
            neutral_vocab: 200,
            hate_vocab: 20,
            marker_vocab: 3,
            tokens_per_sample: 12,
            signal_slots: 3,
            hate_signal: 0.7,
            benign_signal: 0.1,
            injected_tokens: 0,
            association: 1.0,
            inject_eval: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Configuration at the full benchmark's size (23276 / 12681 / 12682).
    pub fn benchmark_scale() -> Self {
        Self {
            samples: 23276,
            validation_samples: 12681,
            test_samples: 12682,
            ..Self::default()
        }
    }

    /// Total vocabulary size including the reserved null id.
    pub fn vocab_size(&self) -> usize {
        1 + self.neutral_vocab + self.hate_vocab + 8 * self.marker_vocab
    }

    fn neutral_token(&self, i: usize) -> u32 {
        (1 + i) as u32
    }

    fn hate_token(&self, i: usize) -> u32 {
        (1 + self.neutral_vocab + i) as u32
    }

    fn marker_token(&self, attribute: Attribute, group: usize, i: usize) -> u32 {
        let block = attribute.index() * 2 + group;
        (1 + self.neutral_vocab + self.hate_vocab + block * self.marker_vocab + i) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if self.samples == 0 {
            return Err(Error::Config("synthetic corpus needs at least one sample".into()));
        }
        if self.neutral_vocab == 0 || self.hate_vocab == 0 || self.marker_vocab == 0 {
            return Err(Error::Config(
                "neutral, hate and marker vocabularies must be nonempty".into(),
            ));
        }
        unit("hate_rate", self.hate_rate)?;
        unit("association", self.association)?;
        unit("hate_signal", self.hate_signal)?;
        unit("benign_signal", self.benign_signal)?;
        for (a, &r) in Attribute::ALL.iter().zip(&self.group0_rate) {
            unit(&format!("group0_rate[{a}]"), r)?;
        }
        for b in &self.bias {
            unit(&format!("bias strength for {}", b.attribute), b.strength)?;
            if b.group > 1 {
                return Err(Error::Config(format!(
                    "bias group for {} must be 0 or 1, got {}",
                    b.attribute, b.group
                )));
            }
        }
        let fixed = 4 + self.signal_slots + self.injected_tokens;
        if self.tokens_per_sample < fixed {
            return Err(Error::Config(format!(
                "tokens_per_sample = {} cannot hold 4 markers, {} signal slots and {} injected tokens",
                self.tokens_per_sample, self.signal_slots, self.injected_tokens
            )));
        }
        Ok(())
    }

    fn injection_probability(&self, groups: &[u8; 4]) -> f64 {
        // Independent chances per matching (attribute, group) pair.
        let keep = self
            .bias
            .iter()
            .filter(|b| groups[b.attribute.index()] == b.group)
            .fold(1.0, |acc, b| acc * (1.0 - b.strength));
        1.0 - keep
    }

    /// Group-0 probability given the label, keeping the group-0 marginal.
    fn associated_rate(&self, attribute: Attribute, p0: f64, label: usize) -> f64 {
        let h = self.hate_rate;
        let mut p = p0;
        for b in self.bias.iter().filter(|b| b.attribute == attribute) {
            let pg = if b.group == 0 { p0 } else { 1.0 - p0 };
            let up = self.association * b.strength * (1.0 - pg);
            let shift = if label == HATE { up } else { -up * h / (1.0 - h) };
            p += if b.group == 0 { shift } else { -shift };
        }
        p.clamp(0.0, 1.0)
    }

    fn draw(&self, rng: &mut impl Rng, id: u64, label: usize, inject: bool) -> Sample {
        let mut groups = [0u8; 4];
        for (a, (g, &p0)) in Attribute::ALL.iter().zip(groups.iter_mut().zip(&self.group0_rate)) {
            let p0 = if inject { self.associated_rate(*a, p0, label) } else { p0 };
            *g = if rng.gen_bool(p0) { 0 } else { 1 };
        }
        let mut tokens = Vec::with_capacity(self.tokens_per_sample);
        for a in Attribute::ALL {
            let g = groups[a.index()] as usize;
            tokens.push(self.marker_token(a, g, rng.gen_range(0..self.marker_vocab)));
        }
        let signal = if label == HATE {
            self.hate_signal
        } else {
            self.benign_signal
        };
        for _ in 0..self.signal_slots {
            if rng.gen_bool(signal) {
                tokens.push(self.hate_token(rng.gen_range(0..self.hate_vocab)));
            }
        }
        // Always consume the draw so clean and injected corpora stay aligned.
        let injected = rng.gen_bool(self.injection_probability(&groups));
        if inject && label == NON_HATE && injected {
            for _ in 0..self.injected_tokens {
                tokens.push(self.hate_token(rng.gen_range(0..self.hate_vocab)));
            }
        }
        while tokens.len() < self.tokens_per_sample {
            tokens.push(self.neutral_token(rng.gen_range(0..self.neutral_vocab)));
        }
        tokens.shuffle(rng);
        Sample {
            id,
            tokens,
            label,
            groups,
        }
    }

    fn draw_many(&self, count: usize, first_id: u64, stream: u64, inject: bool) -> Vec<Sample> {
        // Exact label counts: round(hate_rate * count) hate labels, shuffled.
        let n_hate = (self.hate_rate * count as f64).round() as usize;
        let mut labels: Vec<usize> = (0..count)
            .map(|i| if i < n_hate { HATE } else { NON_HATE })
            .collect();
        labels.shuffle(&mut seeded_rng(self.seed, stream + 0x10));
        let mut rng = seeded_rng(self.seed, stream);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| self.draw(&mut rng, first_id + i as u64, label, inject))
            .collect()
    }
}

/// Draws `config.samples` bias-injected samples with ids `0..samples`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok(config.draw_many(config.samples, 0, 0, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub vocab_size: usize,
    pub train: AttributeTable,
    pub validation: AttributeTable,
    pub test: AttributeTable,
    pub config: SynthConfig,
}

/// Train, validation and test splits with disjoint id ranges.
pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let train = config.draw_many(config.samples, 0, 0, true);
    let v0 = config.samples as u64;
    let validation = config.draw_many(config.validation_samples, v0, 1, config.inject_eval);
    let t0 = v0 + config.validation_samples as u64;
    let test = config.draw_many(config.test_samples, t0, 2, config.inject_eval);
    Ok(Corpus {
        train,
        validation,
        test,
        vocab_size: config.vocab_size(),
    })
}

impl Corpus {
    pub fn manifest(&self, config: &SynthConfig) -> CorpusManifest {
        CorpusManifest {
            seed: config.seed,
            vocab_size: self.vocab_size,
            train: AttributeTable::tally(&self.train),
            validation: AttributeTable::tally(&self.validation),
            test: AttributeTable::tally(&self.test),
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_function_of_config() {
        let cfg = SynthConfig {
            samples: 300,
            ..SynthConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_samples_or_vocab_rejected() {
        let cfg = SynthConfig {
            samples: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            neutral_vocab: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn samples_are_well_formed() {
        let cfg = SynthConfig {
            samples: 500,
            ..SynthConfig::default()
        };
        let vocab = cfg.vocab_size();
        for s in generate_synthetic(&cfg).unwrap() {
            s.validate().unwrap();
            assert_eq!(s.tokens.len(), cfg.tokens_per_sample);
            assert!(s.tokens.iter().all(|&t| (t as usize) < vocab && t != 0));
            for a in Attribute::ALL {
                let g = s.group(a);
                let markers: Vec<u32> = (0..cfg.marker_vocab)
                    .map(|i| cfg.marker_token(a, g, i))
                    .collect();
                assert_eq!(s.tokens.iter().filter(|t| markers.contains(t)).count(), 1);
            }
        }
    }

    #[test]
    fn table_scale_hate_count() {
        let cfg = SynthConfig::benchmark_scale();
        let hate = generate_synthetic(&cfg)
            .unwrap()
            .iter()
            .filter(|s| s.label == HATE)
            .count();
        assert_eq!(hate, 6250);
    }

    #[test]
    fn association_keeps_marginals_and_skews_labels() {
        let cfg = SynthConfig {
            samples: 20000,
            ..SynthConfig::default()
        };
        let train = generate_synthetic(&cfg).unwrap();
        let n = train.len() as f64;
        for a in Attribute::ALL {
            let g0 = train.iter().filter(|s| s.group(a) == 0).count() as f64 / n;
            assert!((g0 - cfg.group0_rate[a.index()]).abs() < 0.02, "{a}: {g0}");
            let rate = |g: usize| {
                let grp: Vec<_> = train.iter().filter(|s| s.group(a) == g).collect();
                grp.iter().filter(|s| s.label == HATE).count() as f64 / grp.len() as f64
            };
            assert!(rate(0) > rate(1) + 0.1, "{a}");
        }
    }

    #[test]
    fn eval_splits_are_clean_by_default() {
        let cfg = SynthConfig {
            samples: 10,
            validation_samples: 5,
            test_samples: 7,
            ..SynthConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let ids: Vec<u64> = c
            .train
            .iter()
            .chain(&c.validation)
            .chain(&c.test)
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, (0..22).collect::<Vec<_>>());
    }
}
