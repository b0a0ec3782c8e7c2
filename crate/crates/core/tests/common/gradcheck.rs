//! Central-difference gradient checks for the graph ops.

use debias_core::graph::{Graph, NodeId};
use debias_core::rng::seeded_rng;
use debias_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 100;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// Builds a scalar from the inputs; `inputs[i]` become graph params.
pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// Expected ratio of the analytic gradient to the finite difference.
    pub scale: f64,
}

pub type MakeCase = fn(&mut ChaCha8Rng) -> Case;

fn case(inputs: Vec<Tensor>, build: Build) -> Case {
    Case {
        inputs,
        build,
        scale: 1.0,
    }
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.value(out).item()
}

/// Norm-wise relative error between the analytic gradient and `scale`
/// times the central difference, over all inputs together.
pub fn rel_error(c: &Case) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.build)(&mut g, &ids);
    g.backward(out).unwrap();
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| g.grad(id).unwrap().into_data())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, t) in c.inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = c.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = c.inputs.clone();
            minus[i].data_mut()[j] -= H;
            numeric.push(c.scale * (eval(&c.build, &plus) - eval(&c.build, &minus)) / (2.0 * H));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic).max(norm(&numeric));
    if denom < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / denom
    }
}

/// Worst relative error of `make` over [`TRIALS`] seeded trials.
pub fn worst_error(stream: u64, make: MakeCase) -> f64 {
    (0..TRIALS)
        .map(|trial| rel_error(&make(&mut seeded_rng(trial, stream))))
        .fold(0.0, f64::max)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn project(g: &mut Graph, node: NodeId, w: &Tensor) -> NodeId {
    g.weighted_sum(node, w.clone()).unwrap()
}

fn matmul(rng: &mut ChaCha8Rng) -> Case {
    let (m, k) = dims(rng);
    let n = rng.gen_range(1..5);
    let w = random(rng, m, n);
    case(
        vec![random(rng, m, k), random(rng, k, n)],
        Box::new(move |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            project(g, y, &w)
        }),
    )
}

fn add(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    case(
        vec![random(rng, m, n), random(rng, m, n)],
        Box::new(move |g, x| {
            let y = g.add(x[0], x[1]).unwrap();
            project(g, y, &w)
        }),
    )
}

fn add_bias(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    case(
        vec![random(rng, m, n), random(rng, 1, n)],
        Box::new(move |g, x| {
            let y = g.add_bias(x[0], x[1]).unwrap();
            project(g, y, &w)
        }),
    )
}

fn scale(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    let c = rng.gen_range(-2.0..2.0);
    case(
        vec![random(rng, m, n)],
        Box::new(move |g, x| {
            let y = g.scale(x[0], c);
            project(g, y, &w)
        }),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    // Keep inputs away from the kink.
    let x = random(rng, m, n).map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
    case(
        vec![x],
        Box::new(move |g, x| {
            let y = g.relu(x[0]);
            project(g, y, &w)
        }),
    )
}

fn tanh(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    case(
        vec![random(rng, m, n).map(|v| 2.0 * v)],
        Box::new(move |g, x| {
            let y = g.tanh(x[0]);
            project(g, y, &w)
        }),
    )
}

fn concat(rng: &mut ChaCha8Rng) -> Case {
    let (m, a) = dims(rng);
    let b = rng.gen_range(1..5);
    let w = random(rng, m, a + b);
    case(
        vec![random(rng, m, a), random(rng, m, b)],
        Box::new(move |g, x| {
            let y = g.concat(x[0], x[1]).unwrap();
            project(g, y, &w)
        }),
    )
}

/// Identity forward, so the finite difference is the plain gradient and the
/// analytic one is `-lambda` times it.
fn grad_reverse(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    let lambda = rng.gen_range(0.1..3.0);
    Case {
        inputs: vec![random(rng, m, n)],
        build: Box::new(move |g, x| {
            let y = g.grad_reverse(x[0], lambda).unwrap();
            project(g, y, &w)
        }),
        scale: -lambda,
    }
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Case {
    let m = rng.gen_range(1..6);
    let c = rng.gen_range(2..5);
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
    case(
        vec![random(rng, m, c).map(|v| 3.0 * v)],
        Box::new(move |g, x| g.softmax_cross_entropy(x[0], &labels).unwrap()),
    )
}

fn l2_distance(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    case(
        vec![random(rng, m, n), random(rng, m, n)],
        Box::new(move |g, x| g.l2_distance(x[0], x[1]).unwrap()),
    )
}

fn embed_mean(rng: &mut ChaCha8Rng) -> Case {
    let vocab = rng.gen_range(2..8);
    let d = rng.gen_range(1..5);
    let m = rng.gen_range(1..5);
    let tokens: Vec<Vec<u32>> = (0..m)
        .map(|_| {
            let len = rng.gen_range(1..6);
            (0..len).map(|_| rng.gen_range(0..vocab) as u32).collect()
        })
        .collect();
    let w = random(rng, m, d);
    case(
        vec![random(rng, vocab, d)],
        Box::new(move |g, x| {
            let y = g.embed_mean(x[0], &tokens).unwrap();
            project(g, y, &w)
        }),
    )
}

fn normalize_rows(rng: &mut ChaCha8Rng) -> Case {
    let m = rng.gen_range(1..5);
    let n = rng.gen_range(2..5);
    let w = random(rng, m, n);
    case(
        vec![random(rng, m, n).map(|v| v + 0.1)],
        Box::new(move |g, x| {
            let y = g.normalize_rows(x[0]);
            project(g, y, &w)
        }),
    )
}

fn supcon(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(2..7);
    let d = rng.gen_range(1..5);
    let tau = rng.gen_range(0.1..1.0);
    let positives: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect())
        .collect();
    case(
        vec![random(rng, n, d)],
        Box::new(move |g, x| g.supcon(x[0], &positives, tau).unwrap()),
    )
}

fn weighted_sum(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    let w = random(rng, m, n);
    case(vec![random(rng, m, n)], Box::new(move |g, x| project(g, x[0], &w)))
}

/// Embedding, affine, tanh, class head and cross-entropy chained together.
fn composed(rng: &mut ChaCha8Rng) -> Case {
    let vocab = 6;
    let (d, h) = (3, 4);
    let tokens: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..4).map(|_| rng.gen_range(0..vocab) as u32).collect())
        .collect();
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
    case(
        vec![
            random(rng, vocab, d),
            random(rng, d, h),
            random(rng, 1, h),
            random(rng, h, 2),
        ],
        Box::new(move |g, x| {
            let pooled = g.embed_mean(x[0], &tokens).unwrap();
            let z = g.matmul(pooled, x[1]).unwrap();
            let z = g.add_bias(z, x[2]).unwrap();
            let z = g.tanh(z);
            let logits = g.matmul(z, x[3]).unwrap();
            g.softmax_cross_entropy(logits, &labels).unwrap()
        }),
    )
}

/// Contrastive loss on unit-normalized rows with opposite-group positives.
fn supcon_normalized(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(2..7);
    let d = rng.gen_range(2..5);
    let groups: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let positives: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|k| groups[i] != groups[k]).collect())
        .collect();
    case(
        vec![random(rng, n, d).map(|v| v + 0.1)],
        Box::new(move |g, x| {
            let z = g.normalize_rows(x[0]);
            g.supcon(z, &positives, 0.5).unwrap()
        }),
    )
}

/// Every differentiable op, plus two composites.
pub const CASES: [(&str, MakeCase); 16] = [
    ("matmul", matmul),
    ("add", add),
    ("add_bias", add_bias),
    ("scale", scale),
    ("relu", relu),
    ("tanh", tanh),
    ("concat", concat),
    ("grad_reverse", grad_reverse),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("l2_distance", l2_distance),
    ("embed_mean", embed_mean),
    ("normalize_rows", normalize_rows),
    ("supcon", supcon),
    ("weighted_sum", weighted_sum),
    ("composed", composed),
    ("supcon_normalized", supcon_normalized),
];
