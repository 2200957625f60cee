//! Pretraining: learning-rate schedule, clipping, AdamW, task scheduling over
//! synchronous workers, checkpoints and per-step metrics.
//!
//! Sampling is stateless. The sample, mask and timestep dropout of every
//! global batch slot are derived from `(seed, step, slot)`, and gradients are
//! averaged in `f64` in a fixed order. A run is therefore reproducible from
//! its config alone, and resuming from a checkpoint replays the same
//! trajectory.

pub mod checkpoint;
pub mod data;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use num_traits::Float;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{timestep_dropout, DEFAULT_TIMESTEP_DROPOUT};
use crate::masking::MaskScheme;
use crate::model::{MaeModel, ModelConfig};
use crate::rng::{derive_key, keyed_rng};
use crate::{key, Error, Result, NUM_PATCHES};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::TrainData;

pub const PAPER_BASE_LR: f64 = 1.32e-4;
pub const PAPER_EFFECTIVE_BATCH: usize = 2048;
pub const PAPER_EPOCHS: usize = 100;
pub const PAPER_WARMUP_EPOCHS: usize = 10;
pub const PAPER_WEIGHT_DECAY: f64 = 0.0457;
pub const PAPER_CLIP_NORM: f64 = 1.0;
/// Batch size the base learning rate refers to.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub effective_batch: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Replaces `epochs × steps_per_epoch`; warmup then scales by
    /// `warmup_epochs / epochs`.
    pub total_steps: Option<usize>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub mask: MaskScheme,
    pub seed: u64,
    pub workers: usize,
    /// Source subsets; `None` selects [`make_tasks`].
    pub tasks: Option<Vec<Vec<String>>>,
    pub timestep_dropout: f64,
    /// Upper bound on timesteps per sample.
    pub max_timesteps: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            effective_batch: PAPER_EFFECTIVE_BATCH,
            base_lr: PAPER_BASE_LR,
            epochs: PAPER_EPOCHS,
            warmup_epochs: PAPER_WARMUP_EPOCHS,
            total_steps: None,
            weight_decay: PAPER_WEIGHT_DECAY,
            clip_norm: PAPER_CLIP_NORM,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            mask: MaskScheme::COMBINED_DEFAULT,
            seed: 0,
            workers: 1,
            tasks: None,
            timestep_dropout: DEFAULT_TIMESTEP_DROPOUT,
            max_timesteps: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.workers == 0 || self.effective_batch == 0 || self.effective_batch % self.workers != 0 {
            return bad(format!(
                "effective batch {} must be a positive multiple of workers {}",
                self.effective_batch, self.workers
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || !(self.adam_eps > 0.0) {
            return bad("optimizer hyper-parameters out of range".into());
        }
        if !(0.0..=1.0).contains(&self.timestep_dropout) {
            return bad(format!("timestep dropout {} outside [0, 1]", self.timestep_dropout));
        }
        if self.total_steps == Some(0) || self.max_timesteps == Some(0) {
            return bad("total_steps and max_timesteps must be positive".into());
        }
        self.mask.validate()?;
        self.model.validate()
    }

    /// `blr · effective_batch / 256`.
    pub fn lr_max(&self) -> f64 {
        self.base_lr * self.effective_batch as f64 / LR_REFERENCE_BATCH
    }

    pub fn micro_batch(&self) -> usize {
        self.effective_batch / self.workers
    }

    /// `(total_steps, warmup_steps)` for a dataset of `n_regions`.
    pub fn schedule(&self, n_regions: usize) -> (usize, usize) {
        let per_epoch = n_regions.div_ceil(self.effective_batch).max(1);
        match self.total_steps {
            Some(total) => (total, total * self.warmup_epochs / self.epochs),
            None => (self.epochs * per_epoch, self.warmup_epochs * per_epoch),
        }
    }
}

/// Linear warmup from 0 to `lr_max`, then half-cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!("warmup {warmup_steps} must be below total {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(lr_max * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// L2 norm over all entries, accumulated in `f64`.
pub fn global_norm<F: Float>(grads: &[F]) -> f64 {
    grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_gradients<F: Float>(grads: &mut [F], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm {max_norm} must be positive")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = F::from(max_norm / norm).unwrap();
        grads.iter_mut().for_each(|g| *g = *g * scale);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: usize,
    pub sources: Vec<String>,
}

/// One task per source, then one task with every source.
pub fn make_tasks(sources: &[String]) -> Result<Vec<Task>> {
    if sources.is_empty() {
        return Err(Error::Empty("source catalog"));
    }
    let mut subsets: Vec<Vec<String>> = sources.iter().map(|s| vec![s.clone()]).collect();
    if sources.len() > 1 {
        subsets.push(sources.to_vec());
    }
    Ok(subsets
        .into_iter()
        .enumerate()
        .map(|(task_id, sources)| Task { task_id, sources })
        .collect())
}

/// User task subsets, checked against the catalog; `None` gives the default.
pub fn resolve_tasks(sources: &[String], user: Option<&[Vec<String>]>) -> Result<Vec<Task>> {
    let Some(user) = user else {
        return make_tasks(sources);
    };
    if sources.is_empty() {
        return Err(Error::Empty("source catalog"));
    }
    if user.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let mut tasks = Vec::with_capacity(user.len());
    for (task_id, subset) in user.iter().enumerate() {
        if subset.is_empty() {
            return Err(Error::Empty("task source subset"));
        }
        for (i, s) in subset.iter().enumerate() {
            if !sources.contains(s) {
                return Err(Error::UnknownSource(s.clone()));
            }
            if subset[..i].contains(s) {
                return Err(Error::InvalidArgument(format!("task {task_id} lists {s} twice")));
            }
        }
        tasks.push(Task { task_id, sources: subset.clone() });
    }
    if let Some(missing) = sources.iter().find(|s| !tasks.iter().any(|t| t.sources.contains(s))) {
        return Err(Error::UncoveredSource(missing.clone()));
    }
    Ok(tasks)
}

/// Decoupled-weight-decay Adam step. Moments are stored in `f32`; the
/// arithmetic is done in `f64`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    model: &MaeModel,
    params: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    grads: &[f64],
    lr: f64,
    step: u64,
    config: &TrainConfig,
) {
    let (b1, b2) = config.betas;
    let t = (step + 1) as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for e in model.layout().entries() {
        let decay = if e.decay { lr * config.weight_decay } else { 0.0 };
        for i in e.range() {
            let g = grads[i];
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mut p = params[i] as f64;
            p -= decay * p;
            p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + config.adam_eps);
            params[i] = p as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Task of worker 0.
    pub task_id: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Mean loss per task trained this step.
    pub task_losses: BTreeMap<usize, f64>,
}

/// A task stream started another pass over its regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapEvent {
    pub step: u64,
    pub task_id: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many total steps, even if the schedule is longer.
    pub stop_at: Option<u64>,
    /// Directory for `metrics.jsonl`, `checkpoint.emck` and abort dumps.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub wraps: Vec<WrapEvent>,
}

struct WorkerOut {
    task_id: usize,
    grad_mean: Vec<f64>,
    losses: Vec<f64>,
    wraps: Vec<WrapEvent>,
}

/// Resolved run state shared by all workers.
struct Plan<'a> {
    config: &'a TrainConfig,
    data: &'a TrainData,
    model: MaeModel,
    tasks: Vec<Task>,
    task_sources: Vec<Vec<usize>>,
    eligible: Vec<Vec<usize>>,
}

impl Plan<'_> {
    /// Region at position `pos` of task `task`'s endless permuted stream.
    fn region_at(&self, task: usize, pos: usize) -> (usize, usize) {
        let el = &self.eligible[task];
        let epoch = pos / el.len();
        let mut order = el.clone();
        order.shuffle(&mut keyed_rng(key![self.config.seed, "order", task, epoch]));
        (order[pos % el.len()], epoch)
    }

    fn run_worker(&self, params: &[f32], step: u64, worker: usize) -> Result<WorkerOut> {
        let c = self.config;
        let m = c.micro_batch();
        let slot = step as usize * c.workers + worker;
        let task = slot % self.tasks.len();
        let occurrence = slot / self.tasks.len();
        let sources = &self.task_sources[task];
        let mut acc = vec![0.0f64; params.len()];
        let mut grads = vec![0.0f32; params.len()];
        let mut losses = Vec::with_capacity(m);
        let mut wraps = Vec::new();
        for j in 0..m {
            let pos = occurrence * m + j;
            let (region, epoch) = self.region_at(task, pos);
            if epoch > 0 && pos % self.eligible[task].len() == 0 {
                wraps.push(WrapEvent { step, task_id: task, epoch });
            }
            let g = step as usize * c.effective_batch + worker * m + j;
            let t = self.data.sample_timesteps(region, sources, c.max_timesteps);
            let base = &self.data.regions[region].sources[&sources[0]].timestamps[..t];
            let mut rng = keyed_rng(key![c.seed, "dropout", step, g]);
            let (timestamps, _) = timestep_dropout(base, c.timestep_dropout, &mut rng)?;
            let mask = c.mask.generate(t, sources.len(), NUM_PATCHES, derive_key(key![c.seed, "mask", step, g]))?;
            let sample = self.data.sample(region, sources, &timestamps);
            grads.fill(0.0);
            let loss = self.model.loss_and_grad(params, &sample, &mask, &mut grads)?;
            acc.iter_mut().zip(&grads).for_each(|(a, &g)| *a += g as f64);
            losses.push(loss.loss);
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(WorkerOut { task_id: task, grad_mean: acc, losses, wraps })
    }
}

fn append_metrics(out_dir: &Option<PathBuf>, m: &StepMetrics) -> Result<()> {
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Run (or resume) pretraining on `data`.
pub fn train(config: &TrainConfig, data: &TrainData, resume: Option<Checkpoint>, opts: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let names = data.source_names();
    let tasks = resolve_tasks(&names, config.tasks.as_deref())?;
    let task_sources: Vec<Vec<usize>> = tasks
        .iter()
        .map(|t| t.sources.iter().map(|s| names.iter().position(|n| n == s).unwrap()).collect())
        .collect();
    let eligible: Vec<Vec<usize>> = task_sources.iter().map(|s| data.eligible(s)).collect();
    if let Some(t) = eligible.iter().position(|e| e.is_empty()) {
        return Err(Error::InvalidArgument(format!("no region carries every source of task {t}: {:?}", tasks[t].sources)));
    }
    let model = MaeModel::new(config.model.clone(), data.sources.clone())?;
    let meta = CheckpointMeta { train: config.clone(), sources: data.sources.clone() };

    let mut ckpt = match resume {
        Some(ck) => {
            if ck.meta.hash() != meta.hash() {
                return Err(Error::Checkpoint("checkpoint config differs from the run config".into()));
            }
            if ck.stats != data.stats {
                return Err(Error::Checkpoint("training data was prepared with different band statistics".into()));
            }
            ck
        }
        None => {
            let n = model.num_params();
            Checkpoint {
                meta,
                seed: config.seed,
                step: 0,
                params: model.init_params(config.seed),
                adam_m: vec![0.0; n],
                adam_v: vec![0.0; n],
                stats: data.stats.clone(),
            }
        }
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (total, warmup) = config.schedule(data.regions.len());
    let stop = opts.stop_at.unwrap_or(total as u64).min(total as u64);
    let plan = Plan { config, data, model, tasks, task_sources, eligible };
    let lr_max = config.lr_max();
    let mut metrics = Vec::new();
    let mut wraps = Vec::new();

    while ckpt.step < stop {
        let step = ckpt.step;
        let lr = lr_at(step as usize, total, warmup, lr_max)?;
        let outs: Vec<Result<WorkerOut>> = (0..config.workers)
            .into_par_iter()
            .map(|w| plan.run_worker(&ckpt.params, step, w))
            .collect();
        let outs = match outs.into_iter().collect::<Result<Vec<_>>>() {
            Ok(o) => o,
            Err(Error::NonFinite(what)) => {
                if let Some(dir) = &opts.out_dir {
                    ckpt.save(dir.join("abort.emck"))?;
                }
                return Err(Error::NonFinite(format!("{what} at step {step}")));
            }
            Err(e) => return Err(e),
        };

        let mut grads = vec![0.0f64; ckpt.params.len()];
        let inv = 1.0 / outs.len() as f64;
        for o in &outs {
            grads.iter_mut().zip(&o.grad_mean).for_each(|(g, &w)| *g += w * inv);
        }
        let grad_norm = clip_gradients(&mut grads, config.clip_norm)?;
        if !grad_norm.is_finite() {
            if let Some(dir) = &opts.out_dir {
                ckpt.save(dir.join("abort.emck"))?;
            }
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        adamw_step(&plan.model, &mut ckpt.params, &mut ckpt.adam_m, &mut ckpt.adam_v, &grads, lr, step, config);
        ckpt.step += 1;

        let all: Vec<f64> = outs.iter().flat_map(|o| o.losses.iter().copied()).collect();
        let mut per_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for o in &outs {
            per_task.entry(o.task_id).or_default().extend(&o.losses);
        }
        let m = StepMetrics {
            step,
            task_id: outs[0].task_id,
            loss: all.iter().sum::<f64>() / all.len() as f64,
            lr,
            grad_norm,
            task_losses: per_task.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect(),
        };
        append_metrics(&opts.out_dir, &m)?;
        metrics.push(m);
        wraps.extend(outs.into_iter().flat_map(|o| o.wraps));
    }
    if let Some(dir) = &opts.out_dir {
        ckpt.save(dir.join("checkpoint.emck"))?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, metrics, wraps })
}
