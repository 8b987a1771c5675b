use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    accumulate_fisher, base_step, build_sparse_mask, clamp_to_region, create_gradient_within, find_fisher,
    random_importance, soft_penalty, FlatRegion, ImportanceMap, OptimizerConfig, OptimizerState,
};
use crate::data::{Split, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::{head_of, is_encoder_param, Batch, ModelObjective, ModelSpec, MultiHeadClassifier};
use crate::probe::lanczos_lambda_max;
use crate::replay::ReplayBuffer;
use crate::tensor::ParameterSet;

/// Independent 64-bit seed for one `(purpose, index)` pair of a run.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The encoder plus the heads of tasks before `current_task`.
pub fn constrained_names(model: &MultiHeadClassifier, current_task: usize) -> Vec<String> {
    model
        .params()
        .names()
        .filter(|n| is_encoder_param(n) || head_of(n).is_some_and(|h| h < current_task))
        .map(str::to_string)
        .collect()
}

/// Pooled accuracy over the `split` rows of tasks `0..=through`.
pub fn evaluate_union(model: &MultiHeadClassifier, stream: &TaskStream, through: usize, split: Split) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for task in stream.tasks.iter().take(through + 1) {
        if task.split(split).is_empty() {
            continue;
        }
        let (c, n) = model.correct_count(&task.split_batch(split)?)?;
        correct += c;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Settings of the per-task sharpness probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lanczos_iters: usize,
    /// Leading validation rows of the first task used as the probe batch.
    pub samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lanczos_iters: 30,
            samples: 64,
        }
    }
}

/// Everything one task's training reads besides the model.
pub struct TaskContext<'a> {
    pub stream: &'a TaskStream,
    pub task: usize,
    pub region: Option<&'a FlatRegion>,
    pub importance: Option<&'a ImportanceMap>,
    pub replay: Option<&'a ReplayBuffer>,
}

pub struct StepEvent<'a> {
    pub task: usize,
    pub step: usize,
    pub params: &'a ParameterSet,
    pub region: Option<&'a FlatRegion>,
}

/// Called after every optimizer step, including replay steps.
pub trait StepObserver {
    fn after_step(&mut self, event: &StepEvent<'_>) -> Result<()>;
}

impl StepObserver for () {
    fn after_step(&mut self, _: &StepEvent<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Training loss used for the update (at the perturbed point when Create is on).
    pub loss: f64,
    /// Unscaled soft-penalty value.
    pub penalty: f64,
    pub clamp_count: usize,
    pub replay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub steps: usize,
    pub records: Vec<StepRecord>,
    /// `(step, accuracy)` on the union of seen validation sets.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_acc: f64,
    /// Constrained coordinates frozen because their anchor is exactly zero.
    pub pinned_anchor_coords: usize,
}

struct Trainer<'a> {
    ctx: &'a TaskContext<'a>,
    config: &'a OptimizerConfig,
    region: Option<&'a FlatRegion>,
    perturbed: HashSet<String>,
    mask: Option<ParameterSet>,
    state: OptimizerState,
    step: usize,
    records: Vec<StepRecord>,
    validation: Vec<(usize, f64)>,
    best: Option<(usize, f64, ParameterSet)>,
}

impl Trainer<'_> {
    fn update(&mut self, model: &mut MultiHeadClassifier, batches: &[Batch], replay: bool) -> Result<StepRecord> {
        let flags = self.config.flags;
        let (loss, mut grads) = if flags.create {
            let perturbed = &self.perturbed;
            let out = create_gradient_within(
                &mut ModelObjective::new(model, batches),
                self.config.rho,
                |n| perturbed.contains(n),
            )?;
            (out.create_loss, out.grads)
        } else {
            model.loss_and_grad(batches)?
        };
        let mut penalty = 0.0;
        if let (true, Some(region), Some(importance)) = (flags.l2, self.region, self.ctx.importance) {
            if self.config.lambda > 0.0 {
                let (value, g) = soft_penalty(model.params(), region, importance)?;
                grads.axpy(self.config.lambda, &g)?;
                penalty = value;
            }
        }
        base_step(&mut self.state, model.params_mut(), &grads, self.mask.as_ref(), self.config)?;
        let clamp_count = match (flags.clamp, self.region) {
            (true, Some(region)) => clamp_to_region(model.params_mut(), region),
            _ => 0,
        };
        Ok(StepRecord {
            step: self.step + 1,
            loss,
            penalty,
            clamp_count,
            replay,
        })
    }

    fn step(
        &mut self,
        model: &mut MultiHeadClassifier,
        batches: &[Batch],
        replay: bool,
        observer: &mut dyn StepObserver,
    ) -> Result<()> {
        let task = self.ctx.task;
        let record = self
            .update(model, batches, replay)
            .map_err(|e| e.at_step(task, self.step + 1))?;
        self.step += 1;
        self.records.push(record);
        observer.after_step(&StepEvent {
            task,
            step: self.step,
            params: model.params(),
            region: self.region,
        })?;
        if self.step.is_multiple_of(self.config.validate_every_steps) {
            self.validate(model)?;
        }
        Ok(())
    }

    fn validate(&mut self, model: &MultiHeadClassifier) -> Result<()> {
        let acc = evaluate_union(model, self.ctx.stream, self.ctx.task, Split::Val)?;
        self.validation.push((self.step, acc));
        if self.best.as_ref().is_none_or(|(_, best, _)| acc > *best) {
            self.best = Some((self.step, acc, model.params().clone()));
        }
        Ok(())
    }
}

/// Trains one task of the stream and restores the parameters with the best
/// validation accuracy on all tasks seen so far.
pub fn train_task(
    model: &mut MultiHeadClassifier,
    ctx: &TaskContext<'_>,
    config: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn StepObserver,
) -> Result<TaskReport> {
    config.validate()?;
    let dataset = ctx
        .stream
        .tasks
        .get(ctx.task)
        .ok_or_else(|| Error::InvalidArgument(format!("task {} not in the stream", ctx.task)))?;
    match model.class_count(ctx.task) {
        Some(c) if c == dataset.class_count => {}
        Some(c) => {
            return Err(Error::InvalidArgument(format!(
                "head {} has {c} classes, task has {}",
                ctx.task, dataset.class_count
            )))
        }
        None => return Err(Error::MissingHead(ctx.task)),
    }
    if dataset.splits.train.is_empty() {
        return Err(Error::InvalidArgument(format!("task `{}` has no training rows", dataset.name)));
    }
    let region = if ctx.task > 0 { ctx.region } else { None };
    let mask = match (region, ctx.importance) {
        (Some(r), Some(imp)) if config.sparse_update_ratio < 1.0 => {
            Some(build_sparse_mask(imp.values(), config.sparse_update_ratio, r.constrained_names())?)
        }
        _ => None,
    };
    let mut trainer = Trainer {
        ctx,
        config,
        region,
        perturbed: constrained_names(model, ctx.task).into_iter().collect(),
        mask,
        state: OptimizerState::new(),
        step: 0,
        records: Vec::new(),
        validation: Vec::new(),
        best: None,
    };
    let replay = ctx.replay.filter(|_| config.flags.replay);
    let mut batch_count = 0;
    for _ in 0..config.epochs {
        let mut order = dataset.splits.train.clone();
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.batch(chunk)?;
            trainer.step(model, std::slice::from_ref(&batch), false, observer)?;
            batch_count += 1;
            if let Some(buffer) = replay.filter(|b| b.should_replay(batch_count)) {
                let batches = buffer.sample_replay_batch(config.batch_size, rng)?;
                trainer.step(model, &batches, true, observer)?;
            }
        }
    }
    if trainer.validation.last().map(|v| v.0) != Some(trainer.step) {
        trainer.validate(model)?;
    }
    let (best_step, best_val_acc, best) = trainer.best.take().expect("validated at least once");
    model.params_mut().copy_from(&best)?;
    Ok(TaskReport {
        task: ctx.task,
        steps: trainer.step,
        records: trainer.records,
        validation: trainer.validation,
        best_step,
        best_val_acc,
        pinned_anchor_coords: region.map_or(0, FlatRegion::pinned_count),
    })
}

/// Resumable state of a sequential run between tasks.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub model: MultiHeadClassifier,
    pub importance: Option<ImportanceMap>,
    pub anchor: Option<ParameterSet>,
    pub replay: ReplayBuffer,
    pub matrix: AccuracyMatrix,
    pub lambda_max: Vec<f64>,
    pub next_task: usize,
}

/// Products of one completed task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub report: TaskReport,
    pub importance: ImportanceMap,
    pub region: Option<FlatRegion>,
}

impl ContinualState {
    pub fn new(stream: &TaskStream, spec: &ModelSpec, config: &OptimizerConfig, seed: u64) -> Result<Self> {
        if stream.is_empty() {
            return Err(Error::InvalidArgument("empty task stream".into()));
        }
        let model = MultiHeadClassifier::new(
            derive_seed(seed, "model", 0),
            stream.input_dim(),
            &spec.hidden_dims,
            &stream.class_counts(),
            spec.activation,
        )?;
        Ok(ContinualState {
            model,
            importance: None,
            anchor: None,
            replay: ReplayBuffer::new(config.store_ratio, config.replay_every)?,
            matrix: AccuracyMatrix::new(),
            lambda_max: Vec::new(),
            next_task: 0,
        })
    }

    pub fn is_done(&self, stream: &TaskStream) -> bool {
        self.next_task >= stream.len()
    }

    /// Trains the next task, then estimates and accumulates importance, moves
    /// the anchor, scores all seen tasks, stores exemplars and runs the probe.
    pub fn advance(
        &mut self,
        stream: &TaskStream,
        config: &OptimizerConfig,
        seed: u64,
        probe: Option<&ProbeConfig>,
        observer: &mut dyn StepObserver,
    ) -> Result<TaskOutcome> {
        let t = self.next_task;
        let dataset = stream
            .tasks
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("stream has no task {t}")))?;
        if self.model.head_count() <= t {
            self.model.add_task_head(dataset.class_count)?;
        }
        let region = match &self.anchor {
            Some(anchor) => Some(FlatRegion::around(anchor.clone(), config.rho)?),
            None => None,
        };
        let ctx = TaskContext {
            stream,
            task: t,
            region: region.as_ref(),
            importance: self.importance.as_ref(),
            replay: Some(&self.replay),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train", t as u64));
        let report = train_task(&mut self.model, &ctx, config, &mut rng, observer)?;

        let fisher = find_fisher(
            &self.model,
            dataset,
            config.fisher_sample_count,
            derive_seed(seed, "fisher", t as u64),
        )?;
        let fresh = if config.flags.find {
            fisher
        } else {
            random_importance(&fisher, derive_seed(seed, "random_importance", t as u64))
        };
        let importance = match &self.importance {
            None => ImportanceMap::new(fresh, config.gamma)?,
            Some(old) => accumulate_fisher(old, &fresh)?,
        };
        self.importance = Some(importance.clone());
        self.anchor = Some(self.model.params().clone());

        let mut row = Vec::with_capacity(t + 1);
        for task in &stream.tasks[..=t] {
            row.push(self.model.accuracy(&task.split_batch(Split::Test)?)?);
        }
        self.matrix.push_row(row)?;

        if config.flags.replay {
            self.replay.add_task(dataset, derive_seed(seed, "exemplars", t as u64))?;
        }
        if let Some(p) = probe {
            let first = &stream.tasks[0];
            let rows: Vec<usize> = first.splits.val.iter().copied().take(p.samples).collect();
            if rows.is_empty() {
                return Err(Error::InvalidArgument("probe needs validation rows in the first task".into()));
            }
            let batch = [first.batch(&rows)?];
            let mut objective = ModelObjective::new(&mut self.model, &batch);
            let est = lanczos_lambda_max(&mut objective, p.lanczos_iters, derive_seed(seed, "lanczos", 0))?;
            self.lambda_max.push(est.lambda_max);
        }
        self.next_task += 1;
        Ok(TaskOutcome {
            report,
            importance,
            region,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub model: MultiHeadClassifier,
    pub matrix: AccuracyMatrix,
    pub reports: Vec<TaskReport>,
    pub importance_history: Vec<ImportanceMap>,
    /// Region each task was trained in; `None` for the first task.
    pub region_history: Vec<Option<FlatRegion>>,
    pub lambda_max: Vec<f64>,
}

/// Trains every task of `stream` in order.
pub fn train_continual(
    stream: &TaskStream,
    spec: &ModelSpec,
    config: &OptimizerConfig,
    seed: u64,
    probe: Option<&ProbeConfig>,
    observer: &mut dyn StepObserver,
) -> Result<ContinualRun> {
    config.validate()?;
    let mut state = ContinualState::new(stream, spec, config, seed)?;
    let mut reports = Vec::new();
    let mut importance_history = Vec::new();
    let mut region_history = Vec::new();
    while !state.is_done(stream) {
        let outcome = state.advance(stream, config, seed, probe, observer)?;
        reports.push(outcome.report);
        importance_history.push(outcome.importance);
        region_history.push(outcome.region);
    }
    Ok(ContinualRun {
        model: state.model,
        matrix: state.matrix,
        reports,
        importance_history,
        region_history,
        lambda_max: state.lambda_max,
    })
}
