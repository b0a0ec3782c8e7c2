use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::memory::{build_memory, random_memory, MemoryBuffer};
use super::{Method, TrainConfig};
use crate::corpus::{vocab_extent, Attribute, Sample, SubDataset, TaskSequence};
use crate::debias::{Batch, DebiasKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Bound, ModelConfig, ModelState, Snapshot};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::seeded_rng;

const SHUFFLE_STREAM: u64 = 0x7368_0000;

/// A training sample tagged with the zero-based stage index of the
/// sub-dataset it came from.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub sample: &'a Sample,
    pub task: usize,
}

/// Component values of one objective evaluation. Terms that were skipped
/// are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub debias: Option<f64>,
    pub generic: Option<f64>,
    pub specific: Option<f64>,
    pub task: Option<f64>,
    pub total: f64,
    /// Contrastive anchors with a positive, for the CL debiaser.
    pub anchors: Option<usize>,
}

/// The objective for one batch, ready for `backward`.
pub struct Objective {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: NodeId,
    pub parts: LossParts,
}

/// Builds `L_cls + α·L_d`, plus `σ·(L_g + L_s + L_task)` from stage 2 on
/// for the replay learner. `t` is 1-based; `focus` is the attribute the
/// debiaser targets for this batch.
pub fn objective(
    state: &ModelState,
    snapshot: Option<&Snapshot>,
    batch: &[Example<'_>],
    t: usize,
    focus: Attribute,
    config: &TrainConfig,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if t == 0 {
        return Err(Error::Usage("stages are numbered from 1".into()));
    }
    let regularized = config.method == Method::Clf && t >= 2;
    if regularized && snapshot.is_none() {
        return Err(Error::Usage(format!("stage {t} needs the previous stage's snapshot")));
    }

    let samples = Batch::new(batch.iter().map(|e| e.sample).collect());
    let tokens = samples.tokens();
    let labels = samples.labels();

    let mut graph = Graph::new();
    let bound = state.bind(&mut graph, true);
    let fwd = bound.forward(&mut graph, &tokens)?;
    let cls = graph.softmax_cross_entropy(fwd.logits, &labels)?;
    let mut parts = LossParts {
        cls: graph.value(cls).item(),
        ..LossParts::default()
    };
    let mut loss = cls;

    if config.alpha > 0.0 && config.debiaser.kind != DebiasKind::None {
        if let Some(term) =
            config
                .debiaser
                .loss_term(state, &mut graph, &bound, &fwd, &samples, focus)?
        {
            parts.debias = Some(graph.value(term.loss).item());
            parts.anchors = term.anchors;
            let weighted = graph.scale(term.loss, config.alpha);
            loss = graph.add(loss, weighted)?;
        }
    }

    if regularized && config.sigma > 0.0 {
        let snapshot = snapshot.expect("checked above");
        let refs: Vec<&[u32]> = batch.iter().map(|e| e.sample.tokens.as_slice()).collect();
        let (g_old, s_old) = snapshot.representations(&refs)?;
        let g_old = graph.input(g_old);
        let s_old = graph.input(s_old);
        let lg = graph.l2_distance(fwd.g, g_old)?;
        let ls = graph.l2_distance(fwd.s, s_old)?;
        let task_logits = bound.task_logits(&mut graph, fwd.s)?;
        let tasks: Vec<usize> = batch.iter().map(|e| e.task).collect();
        let lt = graph.softmax_cross_entropy(task_logits, &tasks)?;
        parts.generic = Some(graph.value(lg).item());
        parts.specific = Some(graph.value(ls).item());
        parts.task = Some(graph.value(lt).item());
        let reg = graph.add(lg, ls)?;
        let reg = graph.add(reg, lt)?;
        let weighted = graph.scale(reg, config.sigma);
        loss = graph.add(loss, weighted)?;
    }

    parts.total = graph.value(loss).item();
    Ok(Objective {
        graph,
        bound,
        loss,
        parts,
    })
}

/// Value of the stage objective for one batch.
pub fn stage_loss(
    state: &ModelState,
    snapshot: Option<&Snapshot>,
    batch: &[Example<'_>],
    t: usize,
    focus: Attribute,
    config: &TrainConfig,
) -> Result<f64> {
    Ok(objective(state, snapshot, batch, t, focus, config)?.parts.total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageResult {
    /// 1-based stage index; MTL reports a single stage 1.
    pub stage: usize,
    /// Focus attribute trained at this stage; `None` for MTL.
    pub focus: Option<Attribute>,
    /// Arg-max predictions for every test sample, in test-set order.
    pub predictions: Vec<usize>,
    /// Total loss at every optimizer step of the stage.
    pub step_losses: Vec<f64>,
    pub memory_size: usize,
    /// Contrastive batches that had no anchor with a positive.
    pub empty_contrastive_batches: usize,
    #[serde(skip)]
    pub state: Option<ModelState>,
}

/// Raw output of one training run.
pub type RunOutput = Vec<StageResult>;

struct StageLog {
    step_losses: Vec<f64>,
    empty_contrastive_batches: usize,
}

fn optimizer(config: &TrainConfig) -> Result<Optimizer> {
    Optimizer::new(match config.optimizer {
        OptimizerKind::Sgd => OptimizerConfig::sgd(config.learning_rate),
        OptimizerKind::Adam => OptimizerConfig::adam(config.learning_rate),
    })
}

/// Trains `state` for `epochs` passes over `pool`. The pool is reshuffled
/// each epoch from a stream reserved for stage `t`; `focus_of` gives the
/// debiasing attribute for the k-th batch of the stage.
fn train_pool(
    state: &mut ModelState,
    snapshot: Option<&Snapshot>,
    pool: &[Example<'_>],
    t: usize,
    epochs: usize,
    focus_of: impl Fn(usize) -> Attribute,
    config: &TrainConfig,
) -> Result<StageLog> {
    let mut opt = optimizer(config)?;
    let mut rng = seeded_rng(config.seed, SHUFFLE_STREAM + t as u64);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut log = StageLog {
        step_losses: Vec::new(),
        empty_contrastive_batches: 0,
    };
    let mut k = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| pool[i]).collect();
            let mut obj = objective(state, snapshot, &batch, t, focus_of(k), config)?;
            obj.graph.backward(obj.loss)?;
            let grads = obj.bound.gradients(&obj.graph)?;
            opt.step(state.params_mut(), &grads)?;
            log.step_losses.push(obj.parts.total);
            if obj.parts.anchors == Some(0) {
                log.empty_contrastive_batches += 1;
            }
            k += 1;
        }
    }
    Ok(log)
}

fn init_state<'a>(
    config: &TrainConfig,
    data: impl IntoIterator<Item = &'a Sample>,
    n_tasks: usize,
) -> Result<ModelState> {
    let inferred = vocab_extent(data).max(2);
    let vocab_size = match config.vocab_size {
        Some(v) if v < inferred => {
            return Err(Error::Config(format!(
                "vocab_size {v} is smaller than the largest token id + 1 ({inferred})"
            )))
        }
        Some(v) => v,
        None => inferred,
    };
    ModelState::new(ModelConfig {
        vocab_size,
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        n_tasks: n_tasks.max(2),
        attribute_heads: Attribute::ALL.to_vec(),
        seed: config.seed,
    })
}

fn check_method(config: &TrainConfig, expected: Method) -> Result<()> {
    config.validate()?;
    if config.method != expected {
        return Err(Error::Config(format!(
            "config.method is {}, expected {expected}",
            config.method
        )));
    }
    Ok(())
}

fn sequential(
    sequence: &TaskSequence,
    subsets: &[SubDataset],
    config: &TrainConfig,
    test: &[Sample],
) -> Result<RunOutput> {
    if test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let stages = sequence.resolve(subsets)?;
    let all = stages
        .iter()
        .flat_map(|d| d.samples.iter())
        .chain(test.iter());
    let mut state = init_state(config, all, sequence.len().max(4))?;
    let mut results = Vec::with_capacity(stages.len());

    for (i, current) in stages.iter().enumerate() {
        let t = i + 1;
        let focus = current.focus;
        let (snapshot, memory) = match (config.method, t) {
            (_, 1) | (Method::FineTune, _) => (None, MemoryBuffer::default()),
            (Method::Clf, _) => (
                Some(Snapshot::capture(&state)),
                build_memory(&state, &stages, t, config.gamma)?,
            ),
            (Method::Er, _) => (None, random_memory(&stages, t, config.gamma, config.seed)?),
            (Method::Mtl, _) => unreachable!("joint training is not sequential"),
        };

        let mut pool: Vec<Example<'_>> = current
            .samples
            .iter()
            .map(|sample| Example { sample, task: i })
            .collect();
        pool.extend(memory.entries.iter().map(|e| Example {
            sample: &e.sample,
            task: e.source_task,
        }));
        if pool.is_empty() {
            return Err(Error::Input(format!("stage {t} ({focus}) has no training samples")));
        }

        let log = train_pool(
            &mut state,
            snapshot.as_ref(),
            &pool,
            t,
            config.epochs,
            |_| focus,
            config,
        )?;
        state.stage = t;
        let predictions = state.predict(test)?;
        log::debug!(
            "{} {} stage {t} ({focus}): pool {} memory {} final loss {:?}",
            config.method,
            config.debiaser.kind.name(),
            pool.len(),
            memory.len(),
            log.step_losses.last()
        );
        results.push(StageResult {
            stage: t,
            focus: Some(focus),
            predictions,
            step_losses: log.step_losses,
            memory_size: memory.len(),
            empty_contrastive_batches: log.empty_contrastive_batches,
            state: Some(state.clone()),
        });
    }
    Ok(results)
}

/// Replay learner: hard-sample memory plus representation and task
/// regularization against the previous stage's snapshot.
pub fn run_clf(
    sequence: &TaskSequence,
    subsets: &[SubDataset],
    config: &TrainConfig,
    test: &[Sample],
) -> Result<RunOutput> {
    check_method(config, Method::Clf)?;
    sequential(sequence, subsets, config, test)
}

/// Sequential training on each sub-dataset alone.
pub fn run_finetune(
    sequence: &TaskSequence,
    subsets: &[SubDataset],
    config: &TrainConfig,
    test: &[Sample],
) -> Result<RunOutput> {
    check_method(config, Method::FineTune)?;
    sequential(sequence, subsets, config, test)
}

/// Sequential training with a uniformly sampled replay memory.
pub fn run_er(
    sequence: &TaskSequence,
    subsets: &[SubDataset],
    config: &TrainConfig,
    test: &[Sample],
) -> Result<RunOutput> {
    check_method(config, Method::Er)?;
    sequential(sequence, subsets, config, test)
}

/// Joint training over the union of all sub-datasets. The debiasing term
/// cycles through the four attributes batch by batch.
pub fn run_mtl(subsets: &[SubDataset], config: &TrainConfig, test: &[Sample]) -> Result<StageResult> {
    check_method(config, Method::Mtl)?;
    if test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let mut union: Vec<&Sample> = subsets.iter().flat_map(|d| d.samples.iter()).collect();
    union.sort_by_key(|s| s.id);
    if union.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if union.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Input("sub-datasets overlap".into()));
    }
    let mut state = init_state(config, union.iter().copied().chain(test.iter()), 4)?;
    let pool: Vec<Example<'_>> = union
        .iter()
        .map(|&sample| Example { sample, task: 0 })
        .collect();
    let log = train_pool(
        &mut state,
        None,
        &pool,
        1,
        config.mtl_epochs,
        |k| Attribute::ALL[k % Attribute::ALL.len()],
        config,
    )?;
    state.stage = 1;
    Ok(StageResult {
        stage: 1,
        focus: None,
        predictions: state.predict(test)?,
        step_losses: log.step_losses,
        memory_size: 0,
        empty_contrastive_batches: log.empty_contrastive_batches,
        state: Some(state),
    })
}

/// Dispatches on `config.method`. MTL ignores `sequence` and returns one
/// stage.
pub fn run(
    sequence: &TaskSequence,
    subsets: &[SubDataset],
    config: &TrainConfig,
    test: &[Sample],
) -> Result<RunOutput> {
    match config.method {
        Method::Clf => run_clf(sequence, subsets, config, test),
        Method::FineTune => run_finetune(sequence, subsets, config, test),
        Method::Er => run_er(sequence, subsets, config, test),
        Method::Mtl => Ok(vec![run_mtl(subsets, config, test)?]),
    }
}
