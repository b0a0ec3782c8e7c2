//! Pluggable debiasers. Each one contributes a loss term that is added,
//! weighted, to the classification objective:
//!
//! - **FGM**: cross-entropy on the pooled embedding pushed by
//!   `ε·∇/‖∇‖` per sample.
//! - **PGD**: the same, with the push found by projected gradient ascent
//!   inside the `ε`-ball.
//! - **ATC**: an attribute classifier on `h` behind gradient reversal.
//! - **CL**: supervised contrastive loss on normalized `g ⊕ s`, where
//!   positives share the class label but sit in the opposite attribute group.
//!
//! Perturbations are computed in a side graph and enter the training graph
//! as constants.

use serde::{Deserialize, Serialize};

use crate::corpus::{Attribute, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Bound, ForwardNodes, ModelState};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebiasKind {
    /// No debiasing term.
    None,
    Fgm,
    Pgd,
    Atc,
    Cl,
}

impl DebiasKind {
    pub fn name(self) -> &'static str {
        match self {
            DebiasKind::None => "none",
            DebiasKind::Fgm => "fgm",
            DebiasKind::Pgd => "pgd",
            DebiasKind::Atc => "atc",
            DebiasKind::Cl => "cl",
        }
    }
}

impl std::str::FromStr for DebiasKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no-debias" => Ok(DebiasKind::None),
            "fgm" => Ok(DebiasKind::Fgm),
            "pgd" => Ok(DebiasKind::Pgd),
            "atc" => Ok(DebiasKind::Atc),
            "cl" => Ok(DebiasKind::Cl),
            other => Err(Error::Config(format!("unknown debiaser '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiaserConfig {
    pub kind: DebiasKind,
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for DebiaserConfig {
    fn default() -> Self {
        Self {
            kind: DebiasKind::None,
            epsilon: 0.5,
            pgd_steps: 3,
            pgd_step_size: 0.2,
            lambda: 10.0,
            tau: 0.05,
        }
    }
}

impl DebiaserConfig {
    pub fn of(kind: DebiasKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.pgd_steps == 0 {
            return Err(Error::Config("pgd_steps must be at least 1".into()));
        }
        if !(self.pgd_step_size >= 0.0) {
            return Err(Error::Config(format!(
                "pgd_step_size must be nonnegative, got {}",
                self.pgd_step_size
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// A mini-batch of samples.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tokens(&self) -> Vec<Vec<u32>> {
        self.samples.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self, attribute: Attribute) -> Vec<usize> {
        self.samples.iter().map(|s| s.group(attribute)).collect()
    }

    /// `mask[i][k]`: `k ≠ i`, same label, opposite group of `attribute`.
    pub fn contrastive_positives(&self, attribute: Attribute) -> Vec<Vec<bool>> {
        let n = self.samples.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|k| {
                        let (a, b) = (self.samples[i], self.samples[k]);
                        k != i && a.label == b.label && a.group(attribute) != b.group(attribute)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Number of anchors with at least one positive in a contrastive mask.
pub fn contrastive_anchors(mask: &[Vec<bool>]) -> usize {
    mask.iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().any(|(k, &p)| p && k != *i))
        .count()
}

/// Gradient of the mean classification loss with respect to the pooled
/// embeddings, evaluated at `pooled + r`.
pub fn pooled_gradient(
    state: &ModelState,
    pooled: &Tensor,
    r: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = state.bind(&mut graph, false);
    let x = graph.param(pooled.zip_map(r, |p, d| p + d));
    let f = bound.forward_from_pooled(&mut graph, x)?;
    let loss = graph.softmax_cross_entropy(f.logits, labels)?;
    graph.backward(loss)?;
    graph.grad(x)
}

/// Projected gradient ascent on the classification loss inside the per-row
/// L2 ball of radius `epsilon`, starting from zero:
/// `r ← Π(r + step·∇/‖∇‖)` repeated `steps` times. Rows with a zero gradient
/// do not move. One step of size `epsilon` is the fast gradient method.
pub fn adversarial_perturbation(
    state: &ModelState,
    pooled: &Tensor,
    labels: &[usize],
    epsilon: f64,
    step_size: f64,
    steps: usize,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if steps == 0 {
        return Err(Error::Config("perturbation needs at least one step".into()));
    }
    let mut r = Tensor::zeros(pooled.rows(), pooled.cols());
    for _ in 0..steps {
        let grad = pooled_gradient(state, pooled, &r, labels)?;
        for row in 0..r.rows() {
            let g = grad.row_slice(row);
            let n = l2_norm(g);
            let rr = r.row_slice_mut(row);
            if n > 0.0 {
                for (v, gv) in rr.iter_mut().zip(g) {
                    *v += step_size * gv / n;
                }
            }
            let m = l2_norm(rr);
            if m > epsilon {
                let shrink = epsilon / m;
                rr.iter_mut().for_each(|v| *v *= shrink);
            }
        }
    }
    Ok(r)
}

/// A debiasing term inside a training graph.
#[derive(Clone, Copy, Debug)]
pub struct DebiasTerm {
    pub loss: NodeId,
    /// Contrastive anchors with a positive (CL only).
    pub anchors: Option<usize>,
}

impl DebiaserConfig {
    /// Appends this debiaser's loss for `batch` to `graph`, reusing the
    /// clean forward pass `fwd`. Returns `None` for [`DebiasKind::None`].
    pub fn loss_term(
        &self,
        state: &ModelState,
        graph: &mut Graph,
        bound: &Bound,
        fwd: &ForwardNodes,
        batch: &Batch<'_>,
        focus: Attribute,
    ) -> Result<Option<DebiasTerm>> {
        self.validate()?;
        let labels = batch.labels();
        let term = match self.kind {
            DebiasKind::None => return Ok(None),
            DebiasKind::Fgm | DebiasKind::Pgd => {
                let (step, steps) = if self.kind == DebiasKind::Fgm {
                    (self.epsilon, 1)
                } else {
                    (self.pgd_step_size, self.pgd_steps)
                };
                let pooled = graph.value(fwd.pooled).clone();
                let r = adversarial_perturbation(state, &pooled, &labels, self.epsilon, step, steps)?;
                let r = graph.input(r);
                let shifted = graph.add(fwd.pooled, r)?;
                let adv = bound.forward_from_pooled(graph, shifted)?;
                DebiasTerm {
                    loss: graph.softmax_cross_entropy(adv.logits, &labels)?,
                    anchors: None,
                }
            }
            DebiasKind::Atc => {
                let logits = bound.attribute_logits(graph, fwd.h, focus, self.lambda)?;
                DebiasTerm {
                    loss: graph.softmax_cross_entropy(logits, &batch.groups(focus))?,
                    anchors: None,
                }
            }
            DebiasKind::Cl => {
                let joint = graph.concat(fwd.g, fwd.s)?;
                let z = graph.normalize_rows(joint);
                let mask = batch.contrastive_positives(focus);
                let anchors = contrastive_anchors(&mask);
                if anchors == 0 {
                    log::debug!("contrastive batch of {} has no valid anchor", batch.len());
                }
                DebiasTerm {
                    loss: graph.supcon(z, &mask, self.tau)?,
                    anchors: Some(anchors),
                }
            }
        };
        Ok(Some(term))
    }
}

fn term_value(
    state: &ModelState,
    batch: &Batch<'_>,
    focus: Attribute,
    config: DebiaserConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut graph = Graph::new();
    let bound = state.bind(&mut graph, true);
    let fwd = bound.forward(&mut graph, &batch.tokens())?;
    let term = config
        .loss_term(state, &mut graph, &bound, &fwd, batch, focus)?
        .expect("kind is not None");
    Ok(graph.value(term.loss).item())
}

/// Classification loss on adversarially shifted pooled embeddings (one step).
pub fn fgm_loss(state: &ModelState, batch: &Batch<'_>, epsilon: f64) -> Result<f64> {
    let config = DebiaserConfig {
        kind: DebiasKind::Fgm,
        epsilon,
        ..DebiaserConfig::default()
    };
    term_value(state, batch, Attribute::Age, config)
}

/// Classification loss after `steps` projected ascent steps.
pub fn pgd_loss(
    state: &ModelState,
    batch: &Batch<'_>,
    epsilon: f64,
    step_size: f64,
    steps: usize,
) -> Result<f64> {
    let config = DebiaserConfig {
        kind: DebiasKind::Pgd,
        epsilon,
        pgd_step_size: step_size,
        pgd_steps: steps,
        ..DebiaserConfig::default()
    };
    term_value(state, batch, Attribute::Age, config)
}

/// Mean cross-entropy of the attribute head against the true groups.
pub fn atc_loss(state: &ModelState, batch: &Batch<'_>, attribute: Attribute, lambda: f64) -> Result<f64> {
    let config = DebiaserConfig {
        kind: DebiasKind::Atc,
        lambda,
        ..DebiaserConfig::default()
    };
    term_value(state, batch, attribute, config)
}

/// Supervised contrastive loss with opposite-group positives.
pub fn cl_loss(state: &ModelState, batch: &Batch<'_>, attribute: Attribute, tau: f64) -> Result<f64> {
    let config = DebiaserConfig {
        kind: DebiasKind::Cl,
        tau,
        ..DebiaserConfig::default()
    };
    term_value(state, batch, attribute, config)
}

/// Mean cross-entropy of the plain classifier on `batch`.
pub fn clean_loss(state: &ModelState, batch: &Batch<'_>) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = state.bind(&mut graph, false);
    let fwd = bound.forward(&mut graph, &batch.tokens())?;
    let loss = graph.softmax_cross_entropy(fwd.logits, &batch.labels())?;
    Ok(graph.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn state(seed: u64) -> ModelState {
        let mut cfg = ModelConfig::new(20, seed);
        cfg.embed_dim = 6;
        cfg.hidden_dim = 6;
        ModelState::new(cfg).unwrap()
    }

    fn samples() -> Vec<Sample> {
        (0..8)
            .map(|i| Sample {
                id: i,
                tokens: vec![(i % 19 + 1) as u32, ((3 * i) % 19 + 1) as u32],
                label: (i % 2) as usize,
                groups: [(i / 2 % 2) as u8, (i / 4 % 2) as u8, 0, 1],
            })
            .collect()
    }

    #[test]
    fn zero_epsilon_fgm_is_clean_loss() {
        let m = state(1);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        assert_eq!(fgm_loss(&m, &batch, 0.0).unwrap(), clean_loss(&m, &batch).unwrap());
    }

    #[test]
    fn single_step_pgd_is_fgm() {
        let m = state(2);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        for eps in [0.05, 0.5, 2.0] {
            assert_eq!(
                pgd_loss(&m, &batch, eps, eps, 1).unwrap(),
                fgm_loss(&m, &batch, eps).unwrap()
            );
        }
    }

    #[test]
    fn fgm_rows_have_radius_epsilon() {
        let m = state(3);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        let tokens: Vec<&[u32]> = s.iter().map(|x| x.tokens.as_slice()).collect();
        let pooled = m.infer(&tokens).unwrap().pooled;
        let r = adversarial_perturbation(&m, &pooled, &batch.labels(), 0.3, 0.3, 1).unwrap();
        for row in 0..r.rows() {
            assert!((l2_norm(r.row_slice(row)) - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_epsilon_rejected() {
        let m = state(4);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        assert!(matches!(fgm_loss(&m, &batch, -0.1), Err(Error::Config(_))));
        assert!(pgd_loss(&m, &batch, 0.1, 0.1, 0).is_err());
    }

    #[test]
    fn atc_forward_ignores_lambda() {
        let m = state(5);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        let a = atc_loss(&m, &batch, Attribute::Gender, 0.0).unwrap();
        let b = atc_loss(&m, &batch, Attribute::Gender, 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn atc_with_zero_lambda_sends_nothing_to_encoder() {
        let m = state(6);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        let mut graph = Graph::new();
        let bound = m.bind(&mut graph, true);
        let fwd = bound.forward(&mut graph, &batch.tokens()).unwrap();
        let term = DebiaserConfig {
            lambda: 0.0,
            ..DebiaserConfig::of(DebiasKind::Atc)
        }
        .loss_term(&m, &mut graph, &bound, &fwd, &batch, Attribute::Age)
        .unwrap()
        .unwrap();
        graph.backward(term.loss).unwrap();
        let grads = bound.gradients(&graph).unwrap();
        for slot in 0..=crate::model::Slot::ENC_B {
            assert!(grads[slot].data().iter().all(|&v| v == 0.0), "slot {slot}");
        }
        let head = m.head_slot(Attribute::Age).unwrap();
        assert!(grads[head].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cl_positive_mask_rule() {
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        let mask = batch.contrastive_positives(Attribute::Age);
        for i in 0..s.len() {
            assert!(!mask[i][i]);
            for k in 0..s.len() {
                let expected = i != k && s[i].label == s[k].label && s[i].groups[0] != s[k].groups[0];
                assert_eq!(mask[i][k], expected);
            }
        }
    }

    #[test]
    fn cl_without_anchor_is_zero() {
        let m = state(7);
        let s: Vec<Sample> = samples().into_iter().filter(|x| x.groups[0] == 0).collect();
        let batch = Batch::new(s.iter().collect());
        assert_eq!(cl_loss(&m, &batch, Attribute::Age, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let m = state(8);
        let s = samples();
        let batch = Batch::new(s.iter().collect());
        assert!(fgm_loss(&m, &batch, 0.5).unwrap() >= 0.0);
        assert!(pgd_loss(&m, &batch, 0.5, 0.2, 3).unwrap() >= 0.0);
        assert!(atc_loss(&m, &batch, Attribute::Age, 1.0).unwrap() >= 0.0);
        assert!(cl_loss(&m, &batch, Attribute::Age, 0.1).unwrap() >= 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(DebiaserConfig::default().validate().is_ok());
        for bad in [
            DebiaserConfig { epsilon: -1.0, ..Default::default() },
            DebiaserConfig { pgd_steps: 0, ..Default::default() },
            DebiaserConfig { tau: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
