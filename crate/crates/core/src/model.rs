//! The toy language-model encoder and the heads of the continual framework.
//!
//! `h = tanh(mean_embed(x)·W_enc + b_enc)`; the disentanglers are
//! `g = tanh(h·W_G + b_G)` and `s = tanh(h·W_S + b_S)`; the class head reads
//! `g ⊕ s`, the task head reads `s`, and each attribute head reads `h`
//! through a gradient-reversal node.
//!
//! Parameters live in one flat list (see [`Slot`]) so the optimizer and the
//! checkpoint format can treat them uniformly. Two forward paths exist: the
//! graph path used for training and a plain tensor path used for inference,
//! snapshots and memory scoring; both call the same kernels and produce
//! bit-identical values.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Attribute, Sample};
use crate::error::{Error, Result};
use crate::graph::{embed_mean_value, Graph, NodeId};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Size of the task-identifier output space.
    pub n_tasks: usize,
    /// Attributes that get an adversarial attribute head.
    pub attribute_heads: Vec<Attribute>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            n_tasks: 4,
            attribute_heads: Attribute::ALL.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.n_tasks == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: vocab {}, embed {}, hidden {}, tasks {}",
                self.vocab_size, self.embed_dim, self.hidden_dim, self.n_tasks
            )));
        }
        Ok(())
    }
}

/// Positions of the fixed parameters in [`ModelState::params`]. Attribute
/// heads follow at `Slot::FIRST_HEAD + 2·k` (weight) and `+ 1` (bias).
pub struct Slot;

impl Slot {
    pub const EMBEDDING: usize = 0;
    pub const ENC_W: usize = 1;
    pub const ENC_B: usize = 2;
    pub const GENERIC_W: usize = 3;
    pub const GENERIC_B: usize = 4;
    pub const SPECIFIC_W: usize = 5;
    pub const SPECIFIC_B: usize = 6;
    pub const CLASS_W: usize = 7;
    pub const CLASS_B: usize = 8;
    pub const TASK_W: usize = 9;
    pub const TASK_B: usize = 10;
    pub const FIRST_HEAD: usize = 11;
}

const FIXED_NAMES: [&str; 11] = [
    "embedding",
    "encoder.weight",
    "encoder.bias",
    "generic.weight",
    "generic.bias",
    "specific.weight",
    "specific.bias",
    "class.weight",
    "class.bias",
    "task.weight",
    "task.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Tensor>,
    /// Number of completed training stages.
    pub stage: usize,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("positive dimensions")
}

impl ModelState {
    /// Seeded initialization: every weight and bias is uniform in
    /// `±1/√fan_in`. Embedding rows are the weights of a one-hot input, so
    /// their fan-in is 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, 0x006d_6f64_656c);
        let (v, e, d, t) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.n_tasks,
        );
        let b = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut params = vec![
            uniform(&mut rng, v, e, 1.0),
            uniform(&mut rng, e, d, b(e)),
            uniform(&mut rng, 1, d, b(e)),
            uniform(&mut rng, d, d, b(d)),
            uniform(&mut rng, 1, d, b(d)),
            uniform(&mut rng, d, d, b(d)),
            uniform(&mut rng, 1, d, b(d)),
            uniform(&mut rng, 2 * d, 2, b(2 * d)),
            uniform(&mut rng, 1, 2, b(2 * d)),
            uniform(&mut rng, d, t, b(d)),
            uniform(&mut rng, 1, t, b(d)),
        ];
        for _ in &config.attribute_heads {
            params.push(uniform(&mut rng, d, 2, b(d)));
            params.push(uniform(&mut rng, 1, 2, b(d)));
        }
        Ok(Self {
            config,
            params,
            stage: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, slot: usize) -> &Tensor {
        &self.params[slot]
    }

    pub fn param_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.params[slot]
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = FIXED_NAMES.iter().map(|s| s.to_string()).collect();
        for a in &self.config.attribute_heads {
            names.push(format!("attribute.{a}.weight"));
            names.push(format!("attribute.{a}.bias"));
        }
        names
    }

    /// Parameter slot of the weight of `attribute`'s head.
    pub fn head_slot(&self, attribute: Attribute) -> Result<usize> {
        self.config
            .attribute_heads
            .iter()
            .position(|&a| a == attribute)
            .map(|k| Slot::FIRST_HEAD + 2 * k)
            .ok_or_else(|| Error::Config(format!("model has no attribute head for {attribute}")))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("sample has no tokens".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Plain forward pass over a batch of token lists.
    pub fn infer(&self, batch: &[&[u32]]) -> Result<Inference> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for t in batch {
            self.check_tokens(t)?;
        }
        let owned: Vec<Vec<u32>> = batch.iter().map(|t| t.to_vec()).collect();
        let pooled = embed_mean_value(self.param(Slot::EMBEDDING), &owned)?;
        self.infer_from_pooled(pooled)
    }

    pub fn infer_from_pooled(&self, pooled: Tensor) -> Result<Inference> {
        let p = &self.params;
        let affine_tanh = |x: &Tensor, w: usize, b: usize| -> Result<Tensor> {
            Ok(x.matmul(&p[w])?.add_row_broadcast(&p[b])?.map(f64::tanh))
        };
        let h = affine_tanh(&pooled, Slot::ENC_W, Slot::ENC_B)?;
        let g = affine_tanh(&h, Slot::GENERIC_W, Slot::GENERIC_B)?;
        let s = affine_tanh(&h, Slot::SPECIFIC_W, Slot::SPECIFIC_B)?;
        let logits = g
            .concat_cols(&s)?
            .matmul(&p[Slot::CLASS_W])?
            .add_row_broadcast(&p[Slot::CLASS_B])?;
        Ok(Inference {
            pooled,
            h,
            g,
            s,
            logits,
        })
    }

    /// `h` for one sample.
    pub fn encode(&self, sample: &Sample) -> Result<Tensor> {
        Ok(self.infer(&[&sample.tokens])?.h)
    }

    pub fn disentangle(&self, h: &Tensor) -> Result<RepresentationPair> {
        let p = &self.params;
        let g = h
            .matmul(&p[Slot::GENERIC_W])?
            .add_row_broadcast(&p[Slot::GENERIC_B])?
            .map(f64::tanh);
        let s = h
            .matmul(&p[Slot::SPECIFIC_W])?
            .add_row_broadcast(&p[Slot::SPECIFIC_B])?
            .map(f64::tanh);
        Ok(RepresentationPair { g, s, h: h.clone() })
    }

    pub fn predict_class(&self, pair: &RepresentationPair) -> Result<Tensor> {
        pair.g
            .concat_cols(&pair.s)?
            .matmul(&self.params[Slot::CLASS_W])?
            .add_row_broadcast(&self.params[Slot::CLASS_B])
    }

    pub fn predict_task(&self, s: &Tensor) -> Result<Tensor> {
        s.matmul(&self.params[Slot::TASK_W])?
            .add_row_broadcast(&self.params[Slot::TASK_B])
    }

    /// Attribute-head logits. The reversal coefficient only affects
    /// gradients, so the forward value does not depend on it.
    pub fn predict_attribute(&self, h: &Tensor, attribute: Attribute, _lambda: f64) -> Result<Tensor> {
        let w = self.head_slot(attribute)?;
        h.matmul(&self.params[w])?.add_row_broadcast(&self.params[w + 1])
    }

    /// Softmax probability of each sample's true label under the class head.
    pub fn true_label_probabilities(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let tokens: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            let probs = self.infer(&tokens)?.logits.softmax_rows();
            out.extend(chunk.iter().enumerate().map(|(r, s)| probs.get(r, s.label)));
        }
        Ok(out)
    }

    /// Arg-max class predictions.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let tokens: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            out.extend(self.infer(&tokens)?.logits.argmax_rows());
        }
        Ok(out)
    }

    /// Places every parameter into `graph`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.clone())
                } else {
                    graph.input(p.clone())
                }
            })
            .collect();
        Bound {
            ids,
            heads: self.config.attribute_heads.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&Checkpoint::from_state(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str::<Checkpoint>(&text)?.into_state()
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub pooled: Tensor,
    pub h: Tensor,
    pub g: Tensor,
    pub s: Tensor,
    pub logits: Tensor,
}

/// The generic and bias-specific views of a hidden representation.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationPair {
    pub g: Tensor,
    pub s: Tensor,
    pub h: Tensor,
}

/// Graph handles for every parameter of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    heads: Vec<Attribute>,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub pooled: NodeId,
    pub h: NodeId,
    pub g: NodeId,
    pub s: NodeId,
    pub logits: NodeId,
}

impl Bound {
    pub fn id(&self, slot: usize) -> NodeId {
        self.ids[slot]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn pooled(&self, graph: &mut Graph, tokens: &[Vec<u32>]) -> Result<NodeId> {
        graph.embed_mean(self.id(Slot::EMBEDDING), tokens)
    }

    fn affine_tanh(&self, graph: &mut Graph, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let z = graph.matmul(x, self.id(w))?;
        let z = graph.add_bias(z, self.id(b))?;
        Ok(graph.tanh(z))
    }

    pub fn encode(&self, graph: &mut Graph, pooled: NodeId) -> Result<NodeId> {
        self.affine_tanh(graph, pooled, Slot::ENC_W, Slot::ENC_B)
    }

    pub fn disentangle(&self, graph: &mut Graph, h: NodeId) -> Result<(NodeId, NodeId)> {
        let g = self.affine_tanh(graph, h, Slot::GENERIC_W, Slot::GENERIC_B)?;
        let s = self.affine_tanh(graph, h, Slot::SPECIFIC_W, Slot::SPECIFIC_B)?;
        Ok((g, s))
    }

    pub fn class_logits(&self, graph: &mut Graph, g: NodeId, s: NodeId) -> Result<NodeId> {
        let joint = graph.concat(g, s)?;
        let z = graph.matmul(joint, self.id(Slot::CLASS_W))?;
        graph.add_bias(z, self.id(Slot::CLASS_B))
    }

    pub fn task_logits(&self, graph: &mut Graph, s: NodeId) -> Result<NodeId> {
        let z = graph.matmul(s, self.id(Slot::TASK_W))?;
        graph.add_bias(z, self.id(Slot::TASK_B))
    }

    pub fn attribute_logits(
        &self,
        graph: &mut Graph,
        h: NodeId,
        attribute: Attribute,
        lambda: f64,
    ) -> Result<NodeId> {
        let k = self
            .heads
            .iter()
            .position(|&a| a == attribute)
            .ok_or_else(|| Error::Config(format!("model has no attribute head for {attribute}")))?;
        let w = Slot::FIRST_HEAD + 2 * k;
        let reversed = graph.grad_reverse(h, lambda)?;
        let z = graph.matmul(reversed, self.id(w))?;
        graph.add_bias(z, self.id(w + 1))
    }

    /// Encoder, disentanglers and class head from an already pooled input.
    pub fn forward_from_pooled(&self, graph: &mut Graph, pooled: NodeId) -> Result<ForwardNodes> {
        let h = self.encode(graph, pooled)?;
        let (g, s) = self.disentangle(graph, h)?;
        let logits = self.class_logits(graph, g, s)?;
        Ok(ForwardNodes {
            pooled,
            h,
            g,
            s,
            logits,
        })
    }

    pub fn forward(&self, graph: &mut Graph, tokens: &[Vec<u32>]) -> Result<ForwardNodes> {
        let pooled = self.pooled(graph, tokens)?;
        self.forward_from_pooled(graph, pooled)
    }

    /// Gradients for every bound parameter, in slot order.
    pub fn gradients(&self, graph: &Graph) -> Result<Vec<Tensor>> {
        self.ids.iter().map(|&id| graph.grad(id)).collect()
    }
}

/// Frozen copy of the model at the end of the previous stage.
#[derive(Clone, Debug)]
pub struct Snapshot(Arc<ModelState>);

impl Snapshot {
    pub fn capture(state: &ModelState) -> Self {
        Snapshot(Arc::new(state.clone()))
    }

    pub fn state(&self) -> &ModelState {
        &self.0
    }

    /// `(G(LM(x)), S(LM(x)))` under the frozen parameters.
    pub fn representations(&self, batch: &[&[u32]]) -> Result<(Tensor, Tensor)> {
        let inf = self.0.infer(batch)?;
        Ok((inf.g, inf.s))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    stage: usize,
    tensors: Vec<CheckpointTensor>,
}

const CHECKPOINT_FORMAT: &str = "debias-checkpoint";

impl Checkpoint {
    fn from_state(state: &ModelState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: state.config.clone(),
            stage: state.stage,
            tensors: state
                .param_names()
                .into_iter()
                .zip(&state.params)
                .map(|(name, t)| CheckpointTensor {
                    name,
                    shape: t.shape(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    fn into_state(self) -> Result<ModelState> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::Input(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut state = ModelState::new(self.config)?;
        let names = state.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), t) in names.iter().enumerate().zip(self.tensors) {
            if &t.name != name || t.shape != state.params[slot].shape() {
                return Err(Error::Input(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    t.name,
                    t.shape,
                    name,
                    state.params[slot].shape()
                )));
            }
            state.params[slot] = Tensor::new(t.shape[0], t.shape[1], t.values)?;
        }
        state.stage = self.stage;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelState {
        let mut cfg = ModelConfig::new(30, seed);
        cfg.embed_dim = 6;
        cfg.hidden_dim = 5;
        ModelState::new(cfg).unwrap()
    }

    fn sample(tokens: Vec<u32>) -> Sample {
        Sample {
            id: 0,
            tokens,
            label: 0,
            groups: [0; 4],
        }
    }

    #[test]
    fn shape_contract() {
        let m = small(1);
        let pair = m.disentangle(&m.encode(&sample(vec![1, 2, 3])).unwrap()).unwrap();
        assert_eq!(pair.g.shape(), [1, 5]);
        assert_eq!(pair.s.shape(), [1, 5]);
        assert_eq!(pair.h.shape(), [1, 5]);
        assert_eq!(m.param(Slot::CLASS_W).shape(), [10, 2]);
        assert_eq!(m.predict_task(&pair.s).unwrap().shape(), [1, 4]);
    }

    #[test]
    fn zero_embeddings_give_identical_h() {
        let mut m = small(2);
        let e = m.param(Slot::EMBEDDING).clone();
        *m.param_mut(Slot::EMBEDDING) = Tensor::zeros(e.rows(), e.cols());
        let a = m.encode(&sample(vec![1, 2])).unwrap();
        let b = m.encode(&sample(vec![9, 17, 4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_pooling_ignores_order() {
        let m = small(3);
        let a = m.encode(&sample(vec![1, 2, 3, 7])).unwrap();
        let b = m.encode(&sample(vec![7, 3, 1, 2])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let m = small(4);
        assert!(matches!(m.encode(&sample(vec![30])), Err(Error::Input(_))));
    }

    #[test]
    fn zero_class_head_is_uniform() {
        let mut m = small(5);
        *m.param_mut(Slot::CLASS_W) = Tensor::zeros(10, 2);
        *m.param_mut(Slot::CLASS_B) = Tensor::zeros(1, 2);
        let pair = m.disentangle(&m.encode(&sample(vec![1])).unwrap()).unwrap();
        let logits = m.predict_class(&pair).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
        assert_eq!(logits.softmax_rows().data(), &[0.5, 0.5]);
    }

    #[test]
    fn swapping_halves_changes_logits() {
        let m = small(6);
        let pair = m.disentangle(&m.encode(&sample(vec![1, 5])).unwrap()).unwrap();
        let swapped = RepresentationPair {
            g: pair.s.clone(),
            s: pair.g.clone(),
            h: pair.h.clone(),
        };
        assert_ne!(m.predict_class(&pair).unwrap(), m.predict_class(&swapped).unwrap());
    }

    #[test]
    fn perturbing_generic_weights_leaves_s_alone() {
        let m = small(7);
        let mut m2 = m.clone();
        m2.param_mut(Slot::GENERIC_W).data_mut()[0] += 0.5;
        let h = m.encode(&sample(vec![2, 3])).unwrap();
        let (a, b) = (m.disentangle(&h).unwrap(), m2.disentangle(&h).unwrap());
        assert_ne!(a.g, b.g);
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn graph_and_plain_paths_agree_bitwise() {
        let m = small(8);
        let tokens = vec![vec![1, 2, 3], vec![4, 4, 29]];
        let refs: Vec<&[u32]> = tokens.iter().map(|t| t.as_slice()).collect();
        let plain = m.infer(&refs).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let f = bound.forward(&mut g, &tokens).unwrap();
        assert_eq!(g.value(f.h), &plain.h);
        assert_eq!(g.value(f.g), &plain.g);
        assert_eq!(g.value(f.s), &plain.s);
        assert_eq!(g.value(f.logits), &plain.logits);
    }

    #[test]
    fn single_task_head_has_zero_loss() {
        let mut cfg = ModelConfig::new(10, 0);
        cfg.n_tasks = 1;
        cfg.embed_dim = 4;
        cfg.hidden_dim = 4;
        let m = ModelState::new(cfg).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let f = bound.forward(&mut g, &[vec![1, 2]]).unwrap();
        let t = bound.task_logits(&mut g, f.s).unwrap();
        let loss = g.softmax_cross_entropy(t, &[0]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn missing_head_is_config_error() {
        let mut cfg = ModelConfig::new(10, 0);
        cfg.attribute_heads = vec![Attribute::Age];
        let m = ModelState::new(cfg).unwrap();
        let h = m.encode(&sample(vec![1])).unwrap();
        assert!(matches!(
            m.predict_attribute(&h, Attribute::Gender, 1.0),
            Err(Error::Config(_))
        ));
        assert!(m.predict_attribute(&h, Attribute::Age, 1.0).is_ok());
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(small(11), small(11));
        assert_ne!(small(11), small(12));
    }
}
