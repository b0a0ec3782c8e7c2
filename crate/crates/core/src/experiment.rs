//! Experiment configuration, corpus preparation, sweeps and per-run result
//! records.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{self, Method, StageResult, TrainConfig};
use crate::corpus::{
    enumerate_sequences, generate_corpus, load_jsonl, stratified_split, Attribute, Sample,
    SubDataset, SynthConfig, TaskSequence,
};
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::fairmetrics::{confusion_by_group, Confusion, GroupConfusion};

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_DIR: &str = "results";
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SynthConfig),
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
        /// Embedding rows for records given as raw text.
        #[serde(default = "default_hash_dims")]
        hash_dims: usize,
    },
}

fn default_hash_dims() -> usize {
    4096
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceSpec {
    /// Every ordering of the four attributes.
    #[default]
    All,
    /// Every ordering of `n` distinct attributes.
    Length(usize),
    Explicit(Vec<Attribute>),
    List(Vec<Vec<Attribute>>),
}

impl SequenceSpec {
    pub fn sequences(&self) -> Result<Vec<TaskSequence>> {
        match self {
            SequenceSpec::All => enumerate_sequences(&Attribute::ALL, Attribute::ALL.len()),
            SequenceSpec::Length(n) => enumerate_sequences(&Attribute::ALL, *n),
            SequenceSpec::Explicit(f) => Ok(vec![TaskSequence::new(f.clone())?]),
            SequenceSpec::List(list) => {
                if list.is_empty() {
                    return Err(Error::Config("sequence list is empty".into()));
                }
                list.iter().map(|f| TaskSequence::new(f.clone())).collect()
            }
        }
    }
}

/// Component switched off for an ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Representation and task regularization (`σ = 0`).
    Bir,
    /// Memory replay (`γ = 0`).
    Replay,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Bir => "bir",
            Ablation::Replay => "replay",
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Ablation::None => {}
            Ablation::Bir => config.sigma = 0.0,
            Ablation::Replay => config.gamma = 0.0,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "bir" => Ok(Ablation::Bir),
            "replay" => Ok(Ablation::Replay),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (expected bir, replay or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    /// Seed of the stratified split into sub-datasets.
    pub split_seed: u64,
    pub train: TrainConfig,
    pub sequences: SequenceSpec,
    pub seeds: Vec<u64>,
    pub ablate: Ablation,
    pub out_dir: Option<PathBuf>,
    /// Write the final model of every run next to its result file.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            split_seed: 0,
            train: TrainConfig::default(),
            sequences: SequenceSpec::default(),
            seeds: vec![0],
            ablate: Ablation::None,
            out_dir: None,
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
        }
        self.train.validate()?;
        self.sequences.sequences()?;
        Ok(())
    }

    /// Training configuration after the ablation.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        self.ablate.apply(&mut t);
        t
    }

    /// The `(sequence, seed)` jobs of a sweep, ordered by sequence then seed.
    /// Multi-task training ignores sequences, so it yields one job per seed.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        let sequences = match self.train.method {
            Method::Mtl => vec![None],
            _ => self.sequences.sequences()?.into_iter().map(Some).collect(),
        };
        Ok(sequences
            .iter()
            .flat_map(|s| {
                self.seeds.iter().map(move |&seed| Job {
                    sequence: s.clone(),
                    seed,
                })
            })
            .collect())
    }
}

/// Training sub-datasets (one per attribute, in attribute order) and the
/// held-out evaluation sets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub subsets: Vec<SubDataset>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab_size: Option<usize>,
}

pub fn load_corpus(source: &CorpusSource) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>, Option<usize>)> {
    match source {
        CorpusSource::Synthetic(cfg) => {
            let c = generate_corpus(cfg)?;
            Ok((c.train, c.validation, c.test, Some(c.vocab_size)))
        }
        CorpusSource::Files {
            train,
            test,
            validation,
            hash_dims,
        } => {
            let tr = load_jsonl(train, *hash_dims)?;
            let te = load_jsonl(test, *hash_dims)?;
            let va = match validation {
                Some(p) => load_jsonl(p, *hash_dims)?,
                None => Vec::new(),
            };
            Ok((tr, va, te, None))
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (train, validation, test, vocab) = load_corpus(&config.corpus)?;
    let subsets = stratified_split(&train, Attribute::ALL.len(), &Attribute::ALL, config.split_seed)?;
    Ok(Prepared {
        subsets,
        validation,
        test,
        vocab_size: vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Job {
    pub sequence: Option<TaskSequence>,
    pub seed: u64,
}

/// Confusion counts of one evaluation, sufficient to recompute every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub focus: Option<Attribute>,
    pub overall: Confusion,
    pub by_attribute: BTreeMap<Attribute, GroupConfusion>,
    /// SHA-256 over the predictions, one ASCII digit per test sample.
    pub predictions_sha256: String,
    pub memory_size: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub empty_contrastive_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub method: Method,
    pub debiaser: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub sequence: Option<Vec<Attribute>>,
    pub test_size: usize,
    pub stages: Vec<StageRecord>,
    pub config: ExperimentConfig,
}

impl RunRecord {
    /// Grouping key used by reports.
    pub fn label(&self) -> (String, String, String) {
        (
            self.method.name().to_string(),
            self.debiaser.clone(),
            self.ablation.name().to_string(),
        )
    }

    /// `(sequence slug, seed)`, the pairing key across methods.
    pub fn pairing_key(&self) -> (String, u64) {
        let slug = match &self.sequence {
            Some(s) => s.iter().map(|a| a.key()).collect::<Vec<_>>().join("-"),
            None => "joint".into(),
        };
        (slug, self.seed)
    }

    pub fn file_name(&self) -> String {
        let (slug, seed) = self.pairing_key();
        result_file_name(self.method, &self.debiaser, self.ablation, &slug, seed)
    }
}

fn result_file_name(method: Method, debiaser: &str, ablation: Ablation, slug: &str, seed: u64) -> String {
    let mut name = format!("{}-{}", method.name(), debiaser);
    if ablation != Ablation::None {
        name.push_str(&format!("-no{}", ablation.name()));
    }
    format!("{name}-{slug}-s{seed}.json")
}

pub fn predictions_digest(predictions: &[usize]) -> String {
    let mut h = Sha256::new();
    for p in predictions {
        h.update(p.to_string().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn stage_record(result: &StageResult, test: &[Sample]) -> Result<StageRecord> {
    let mut overall = Confusion::default();
    for (s, &p) in test.iter().zip(&result.predictions) {
        overall.record(s.label, p);
    }
    let by_attribute = Attribute::ALL
        .iter()
        .map(|&a| Ok((a, confusion_by_group(&result.predictions, test, a)?)))
        .collect::<Result<_>>()?;
    Ok(StageRecord {
        stage: result.stage,
        focus: result.focus,
        overall,
        by_attribute,
        predictions_sha256: predictions_digest(&result.predictions),
        memory_size: result.memory_size,
        steps: result.step_losses.len(),
        final_loss: result.step_losses.last().copied(),
        empty_contrastive_batches: result.empty_contrastive_batches,
    })
}

/// Trains one job and returns its raw stage results.
pub fn execute(config: &ExperimentConfig, data: &Prepared, job: &Job) -> Result<Vec<StageResult>> {
    let mut train = config.effective_train();
    train.seed = job.seed;
    if train.vocab_size.is_none() {
        train.vocab_size = data.vocab_size;
    }
    match &job.sequence {
        Some(seq) => continual::run(seq, &data.subsets, &train, &data.test),
        None => Ok(vec![continual::run_mtl(&data.subsets, &train, &data.test)?]),
    }
}

pub fn run_job(config: &ExperimentConfig, data: &Prepared, job: &Job) -> Result<(RunRecord, Vec<StageResult>)> {
    let stages = execute(config, data, job)?;
    let record = RunRecord {
        schema_version: RESULT_SCHEMA_VERSION,
        method: config.train.method,
        debiaser: config.train.debiaser.kind.name().to_string(),
        ablation: config.ablate,
        seed: job.seed,
        sequence: job.sequence.as_ref().map(|s| s.focuses.clone()),
        test_size: data.test.len(),
        stages: stages
            .iter()
            .map(|s| stage_record(s, &data.test))
            .collect::<Result<_>>()?,
        config: config.clone(),
    };
    Ok((record, stages))
}

/// Files completed by earlier invocations of a sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub completed: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Runs every job of `config` with up to `workers` in parallel, writing one
/// result file per job under `out/results`. Jobs listed in the run manifest
/// whose files still exist are skipped.
pub fn sweep(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepSummary> {
    config.validate()?;
    let dir = out.join(RESULTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = RunManifest::load(out)?;
    let jobs = config.jobs()?;

    let name_of = |job: &Job| {
        let slug = job.sequence.as_ref().map_or("joint".to_string(), |s| s.slug());
        result_file_name(
            config.train.method,
            config.train.debiaser.kind.name(),
            config.ablate,
            &slug,
            job.seed,
        )
    };
    let mut summary = SweepSummary::default();
    let mut pending = Vec::new();
    for job in jobs {
        let name = name_of(&job);
        if manifest.completed.contains(&name) && dir.join(&name).exists() {
            summary.skipped.push(dir.join(name));
        } else {
            pending.push(job);
        }
    }
    if pending.is_empty() {
        return Ok(summary);
    }

    let data = prepare(config)?;
    let manifest = Mutex::new(manifest);
    let written = par_map(&pending, workers, |job| {
        let (record, stages) = run_job(config, &data, job)?;
        let name = name_of(job);
        let path = dir.join(&name);
        write_json(&path, &record)?;
        if config.save_checkpoints {
            if let Some(state) = stages.last().and_then(|s| s.state.as_ref()) {
                state.save_checkpoint(&path.with_extension("ckpt.json"))?;
            }
        }
        let mut m = manifest.lock().expect("manifest lock");
        if !m.completed.contains(&name) {
            m.completed.push(name);
            m.completed.sort();
        }
        m.save(out)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    })?;
    summary.written = written;
    Ok(summary)
}
