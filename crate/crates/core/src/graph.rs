//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each node records the
//! operation that produced it and the ids of its inputs, which always precede
//! it. [`Graph::backward`] walks the tape once in reverse. Only the operations
//! the continual-debiasing model needs are provided.

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, log_sum_exp, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Constant leaf; never receives a gradient.
    Input,
    /// Differentiable leaf.
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Concat(NodeId, NodeId),
    GradReverse(NodeId, f64),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    L2Distance(NodeId, NodeId),
    EmbedMean {
        table: NodeId,
        tokens: Vec<Vec<u32>>,
    },
    NormalizeRows(NodeId),
    SupCon {
        z: NodeId,
        positives: Vec<Vec<bool>>,
        tau: f64,
    },
    WeightedSum(NodeId, Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let needs_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn guard_open(&self) {
        // Appending after backward would desynchronize the gradient buffer.
        assert!(self.grads.is_none(), "graph is frozen after backward");
    }

    /// A constant; gradients are not tracked through it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.guard_open();
        self.push(Op::Input, value, &[])
    }

    /// A differentiable leaf whose gradient can be read after `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.guard_open();
        self.push(Op::Param, value, &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard_open();
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard_open();
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "add")?;
        let value = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    /// `a` plus a `1 × cols` row broadcast over its rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.guard_open();
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(Op::AddBias(a, bias), value, &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, coefficient: f64) -> NodeId {
        self.guard_open();
        let value = self.value(a).map(|x| x * coefficient);
        self.push(Op::Scale(a, coefficient), value, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.guard_open();
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.guard_open();
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    /// Row-wise concatenation `a ⊕ b`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard_open();
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::Concat(a, b), value, &[a, b]))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        self.guard_open();
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "gradient reversal coefficient must be nonnegative, got {lambda}"
            )));
        }
        let value = self.value(a).clone();
        Ok(self.push(Op::GradReverse(a, lambda), value, &[a]))
    }

    /// Mean over rows of `-log softmax(logits_r)[label_r]`, as a `1 × 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.guard_open();
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::Input(format!(
                "cross entropy: {} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Input(format!(
                "cross entropy: label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row_slice(r);
            total += log_sum_exp(row.iter().copied()) - row[label];
        }
        let loss = total / labels.len() as f64;
        let probs = lv.softmax_rows();
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Mean over rows of `‖a_r − b_r‖₂`, as a `1 × 1` node.
    pub fn l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.guard_open();
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "l2_distance")?;
        let mut total = 0.0;
        for r in 0..va.rows() {
            total += row_distance(va.row_slice(r), vb.row_slice(r));
        }
        let value = Tensor::scalar(total / va.rows() as f64);
        Ok(self.push(Op::L2Distance(a, b), value, &[a, b]))
    }

    /// Mean-pools rows of an embedding table: row `i` of the output is the
    /// average of `table[t]` over `t ∈ tokens[i]`.
    pub fn embed_mean(&mut self, table: NodeId, tokens: &[Vec<u32>]) -> Result<NodeId> {
        self.guard_open();
        let tv = self.value(table);
        if tokens.is_empty() {
            return Err(Error::Input("embed_mean: empty batch".into()));
        }
        let value = embed_mean_value(tv, tokens)?;
        Ok(self.push(
            Op::EmbedMean {
                table,
                tokens: tokens.to_vec(),
            },
            value,
            &[table],
        ))
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.guard_open();
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_slice_mut(r);
            let n = l2_norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(Op::NormalizeRows(a), value, &[a])
    }

    /// Supervised contrastive loss over the rows of `z`.
    ///
    /// For every anchor `i` with at least one positive,
    /// `ℓ_i = −log(Σ_{p∈P(i)} e^{z_i·z_p/τ} / Σ_{k≠i} e^{z_i·z_k/τ})`; the node
    /// holds the mean of `ℓ_i` over those anchors, or 0 when there are none.
    /// `positives[i][i]` is ignored.
    pub fn supcon(&mut self, z: NodeId, positives: &[Vec<bool>], tau: f64) -> Result<NodeId> {
        self.guard_open();
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let zv = self.value(z);
        let n = zv.rows();
        if positives.len() != n || positives.iter().any(|row| row.len() != n) {
            return Err(Error::Input(format!(
                "supcon: positive mask must be {n}x{n}"
            )));
        }
        let sims = zv.matmul_t(zv);
        let mut total = 0.0;
        let mut anchors = 0usize;
        for i in 0..n {
            if !has_positive(positives, i) {
                continue;
            }
            let logits = |k: usize| sims.get(i, k) / tau;
            let pos = (0..n).filter(|&k| k != i && positives[i][k]).map(logits);
            let all = (0..n).filter(|&k| k != i).map(logits);
            total += log_sum_exp(all) - log_sum_exp(pos);
            anchors += 1;
        }
        let loss = if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        };
        Ok(self.push(
            Op::SupCon {
                z,
                positives: positives.to_vec(),
                tau,
            },
            Tensor::scalar(loss),
            &[z],
        ))
    }

    /// `Σ a ∘ weights`, as a `1 × 1` node. Handy for scalarizing test graphs.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        self.guard_open();
        let va = self.value(a);
        va.check_same_shape(&weights, "weighted_sum")?;
        let value = Tensor::scalar(dot(va.data(), weights.data()));
        Ok(self.push(Op::WeightedSum(a, weights), value, &[a]))
    }

    /// Runs the reverse sweep from a scalar `loss`. Returns how many nodes were
    /// visited. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize> {
        if self.grads.is_some() {
            return Err(Error::Usage(
                "backward already ran on this graph; rebuild it with a fresh forward pass".into(),
            ));
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        self.grads = Some(grads);
        Ok(visited)
    }

    /// Gradient of the last backward's loss with respect to `id`. Nodes the
    /// loss does not depend on get zeros.
    pub fn grad(&self, id: NodeId) -> Result<Tensor> {
        let grads = self.grads.as_ref().ok_or_else(|| {
            Error::Usage("gradients requested before backward".into())
        })?;
        Ok(grads[id.0].clone().unwrap_or_else(|| {
            let v = self.value(id);
            Tensor::zeros(v.rows(), v.cols())
        }))
    }

    pub fn has_run_backward(&self) -> bool {
        self.grads.is_some()
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |target: NodeId, g: Tensor| {
            if !self.nodes[target.0].needs_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    send(*a, up.matmul_t(vb));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, va.t_matmul(up));
                }
            }
            Op::Add(a, b) => {
                send(*a, up.clone());
                send(*b, up.clone());
            }
            Op::AddBias(a, bias) => {
                send(*a, up.clone());
                send(*bias, up.column_sums());
            }
            Op::Scale(a, c) => send(*a, up.map(|g| g * c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, up.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                send(*a, up.zip_map(y, |g, y| g * (1.0 - y * y)));
            }
            Op::Concat(a, b) => {
                let (left, right) = up.split_cols(self.value(*a).cols());
                send(*a, left);
                send(*b, right);
            }
            Op::GradReverse(a, lambda) => send(*a, up.map(|g| -lambda * g)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = up.item() / labels.len() as f64;
                let mut g = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = g.row_slice_mut(r);
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, g);
            }
            Op::L2Distance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = up.item() / va.rows() as f64;
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let (ra, rb) = (va.row_slice(r), vb.row_slice(r));
                    let d = row_distance(ra, rb);
                    if d > 0.0 {
                        for ((g, x), y) in ga.row_slice_mut(r).iter_mut().zip(ra).zip(rb) {
                            *g = scale * (x - y) / d;
                        }
                    }
                }
                let gb = ga.map(|v| -v);
                send(*a, ga);
                send(*b, gb);
            }
            Op::EmbedMean { table, tokens } => {
                let tv = self.value(*table);
                let mut g = Tensor::zeros(tv.rows(), tv.cols());
                for (r, toks) in tokens.iter().enumerate() {
                    let w = 1.0 / toks.len() as f64;
                    let up_row = up.row_slice(r);
                    for &t in toks {
                        for (gv, u) in g.row_slice_mut(t as usize).iter_mut().zip(up_row) {
                            *gv += w * u;
                        }
                    }
                }
                send(*table, g);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = l2_norm(x.row_slice(r));
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, ur) = (y.row_slice(r), up.row_slice(r));
                    let proj = dot(yr, ur);
                    for ((gv, &yv), &uv) in g.row_slice_mut(r).iter_mut().zip(yr).zip(ur) {
                        *gv = (uv - yv * proj) / n;
                    }
                }
                send(*a, g);
            }
            Op::SupCon { z, positives, tau } => {
                send(*z, supcon_grad(self.value(*z), positives, *tau, up.item()));
            }
            Op::WeightedSum(a, w) => {
                let u = up.item();
                send(*a, w.map(|v| v * u));
            }
        }
    }
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn has_positive(positives: &[Vec<bool>], i: usize) -> bool {
    positives[i]
        .iter()
        .enumerate()
        .any(|(k, &p)| p && k != i)
}

pub(crate) fn embed_mean_value(table: &Tensor, tokens: &[Vec<u32>]) -> Result<Tensor> {
    let mut out = Tensor::zeros(tokens.len(), table.cols());
    for (r, toks) in tokens.iter().enumerate() {
        if toks.is_empty() {
            return Err(Error::Input(format!("embed_mean: row {r} has no tokens")));
        }
        let w = 1.0 / toks.len() as f64;
        let row = out.row_slice_mut(r);
        for &t in toks {
            let t = t as usize;
            if t >= table.rows() {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocabulary of {}",
                    table.rows()
                )));
            }
            for (o, e) in row.iter_mut().zip(table.row_slice(t)) {
                *o += w * e;
            }
        }
    }
    Ok(out)
}

fn supcon_grad(z: &Tensor, positives: &[Vec<bool>], tau: f64, upstream: f64) -> Tensor {
    let n = z.rows();
    let sims = z.matmul_t(z);
    let anchors = (0..n).filter(|&i| has_positive(positives, i)).count();
    let mut g = Tensor::zeros(n, z.cols());
    if anchors == 0 {
        return g;
    }
    let scale = upstream / (anchors as f64 * tau);
    // coeff[i][k] = ∂ℓ_i/∂(z_i·z_k/τ)
    let mut coeff = vec![0.0; n * n];
    for i in 0..n {
        if !has_positive(positives, i) {
            continue;
        }
        let mut all: Vec<f64> = (0..n)
            .map(|k| if k == i { f64::NEG_INFINITY } else { sims.get(i, k) / tau })
            .collect();
        let mut pos: Vec<f64> = (0..n)
            .map(|k| {
                if k != i && positives[i][k] {
                    sims.get(i, k) / tau
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        softmax_in_place(&mut all);
        softmax_in_place(&mut pos);
        for k in 0..n {
            if k != i {
                coeff[i * n + k] = all[k] - pos[k];
            }
        }
    }
    for i in 0..n {
        for k in 0..n {
            let c = coeff[i * n + k];
            if c == 0.0 {
                continue;
            }
            let zk = z.row_slice(k).to_vec();
            let zi = z.row_slice(i).to_vec();
            for (gv, v) in g.row_slice_mut(i).iter_mut().zip(&zk) {
                *gv += scale * c * v;
            }
            for (gv, v) in g.row_slice_mut(k).iter_mut().zip(&zi) {
                *gv += scale * c * v;
            }
        }
    }
    g
}
