//! Sequential training over attribute-focused sub-datasets: the replay and
//! representation-regularized learner plus the fine-tune, experience replay
//! and multi-task baselines.

mod memory;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use memory::{
    build_memory, lowest_probability_indices, random_memory, retained_count, select_memory,
    MemoryBuffer, MemoryEntry,
};
pub use train::{
    objective, run, run_clf, run_er, run_finetune, run_mtl, stage_loss, Example, LossParts,
    Objective, RunOutput, StageResult,
};

use crate::debias::{DebiasKind, DebiaserConfig};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Clf,
    FineTune,
    Er,
    Mtl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Clf, Method::FineTune, Method::Er, Method::Mtl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Clf => "clf",
            Method::FineTune => "finetune",
            Method::Er => "er",
            Method::Mtl => "mtl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "clf" => Ok(Method::Clf),
            "finetune" | "ft" => Ok(Method::FineTune),
            "er" => Ok(Method::Er),
            "mtl" => Ok(Method::Mtl),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Store ratio.
    pub gamma: f64,
    /// Weight of the debiasing term.
    pub alpha: f64,
    /// Weight of the representation and task regularizers.
    pub sigma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub mtl_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub debiaser: DebiaserConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Embedding rows; inferred from the data when absent.
    pub vocab_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tuned(Method::Clf, DebiasKind::Cl)
    }
}

impl TrainConfig {
    /// Store ratio, debias weight and regularization weight tuned per debiaser.
    pub fn tuned_weights(kind: DebiasKind) -> (f64, f64, f64) {
        match kind {
            DebiasKind::Fgm => (0.1, 1.0, 0.1),
            DebiasKind::Pgd => (0.1, 1.0, 0.05),
            DebiasKind::Atc => (0.05, 0.1, 0.05),
            DebiasKind::Cl => (0.1, 0.1, 0.1),
            DebiasKind::None => (0.1, 0.0, 0.1),
        }
    }

    pub fn tuned(method: Method, kind: DebiasKind) -> Self {
        let (gamma, alpha, sigma) = Self::tuned_weights(kind);
        Self {
            method,
            gamma,
            alpha,
            sigma,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            epochs: 5,
            mtl_epochs: 10,
            batch_size: 32,
            seed: 0,
            debiaser: DebiaserConfig::of(kind),
            embed_dim: 64,
            hidden_dim: 64,
            vocab_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        for (name, v) in [("alpha", self.alpha), ("sigma", self.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.debiaser.validate()
    }
}
