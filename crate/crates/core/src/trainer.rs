//! Training: the batched optimisation step and the pretrain / finetune loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{breakdown, LossBreakdown, Model};
use crate::optim::{clip_grad_norm, Adam};
use crate::params::Gradients;
use crate::scalar::Scalar;
use crate::synthdata::{
    assemble_example, derive_seed, DatasetManifest, ExampleRecord, ImageCache, Split, TrainingExample,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

/// Model plus optimiser state and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Optimisation steps completed in the current stage.
    pub step: u64,
    pub stage: Stage,
    pub object_id: Option<String>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        let c = &model.config;
        let adam = Adam::new(&model.store, c.adam_beta1, c.adam_beta2, c.adam_eps);
        Self {
            model,
            adam,
            step: 0,
            stage: Stage::Pretrain,
            object_id: None,
        }
    }

    /// Starts a new stage with fresh optimiser moments.
    pub fn begin_stage(&mut self, stage: Stage, object_id: Option<String>) {
        let c = &self.model.config;
        self.adam = Adam::new(&self.model.store, c.adam_beta1, c.adam_beta2, c.adam_eps);
        self.step = 0;
        self.stage = stage;
        self.object_id = object_id;
    }
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: Stage,
    pub step: u64,
    pub epoch: u64,
    pub l_sd: f64,
    pub l_gc: f64,
    pub l_lc: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}

/// Timestep and noise drawn for one batch element.
pub fn draw_noise<T: Scalar>(seed: u64, timesteps: usize, shape: &[usize]) -> (usize, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(0..timesteps);
    let noise = Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    (t, noise)
}

/// Batch-mean losses and gradients; the draws of element `i` come from
/// `derive_seed(seed, [i])`.
pub fn batch_objective<T: Scalar>(
    model: &Model<T>,
    batch: &[TrainingExample],
    seed: u64,
) -> Result<(LossBreakdown, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let schedule = model.schedule();
    let shape = [model.codec.channels(), model.codec.size() * model.codec.size()];
    let mut grads = Gradients::empty(model.store.len());
    let mut losses = LossBreakdown::default();
    for (i, ex) in batch.iter().enumerate() {
        let (t, noise) = draw_noise::<T>(derive_seed(seed, &[i as u64]), schedule.timesteps, &shape);
        let (cond, z0, gt) = model.prepare(ex)?;
        let mut g = Graph::new(&model.store);
        let obj = model.objective(&mut g, &cond, &z0, &ex.references, &gt, t, &noise, &schedule)?;
        losses.add(&breakdown(&g, &obj));
        grads.merge(g.backward(obj.total));
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(T::lit(inv));
    Ok((losses.scaled(inv), grads))
}

/// Computes the batch objective and applies one clipped Adam update.
pub fn training_step<T: Scalar>(state: &mut TrainState<T>, batch: &[TrainingExample], seed: u64) -> Result<StepOutcome> {
    let (losses, mut grads) = batch_objective(&state.model, batch, seed)?;
    if !losses.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            last_good: "none".into(),
        });
    }
    let ids = state.model.trainable_params();
    let cfg = &state.model.config;
    let grad_norm = clip_grad_norm(&mut grads, &ids, cfg.grad_clip);
    let lr = cfg.lr;
    state.adam.step(&mut state.model.store, &grads, &ids, lr);
    state.step += 1;
    Ok(StepOutcome { losses, grad_norm })
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Final checkpoint path; periodic checkpoints go next to it.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metrics file (appended to).
    pub metrics: Option<PathBuf>,
    /// Stop after this many steps of the stage (overrides the config when set).
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<MetricRecord>,
}

fn periodic_path(base: &Path, step: u64) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".step{step}"));
    base.with_file_name(name)
}

/// Number of references used for one training example.
fn choose_k(random: bool, max_k: usize, available: usize, seed: u64) -> usize {
    let hi = max_k.min(available).max(1);
    if random {
        ChaCha8Rng::seed_from_u64(seed).gen_range(1..=hi)
    } else {
        hi
    }
}

/// Runs `state` over `records` until the stage's step budget is used up.
/// Resumes from `state.step`.
fn run_stage<T: Scalar>(
    mut state: TrainState<T>,
    manifest: &DatasetManifest,
    records: &[&ExampleRecord],
    epochs: usize,
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    let cfg = state.model.config.clone();
    let hash = cfg.hash();
    let batch = cfg.batch_size;
    let steps_per_epoch = records.len().div_ceil(batch) as u64;
    let mut total = steps_per_epoch * epochs as u64;
    let cap = opts.max_steps.or((cfg.max_steps > 0).then_some(cfg.max_steps as u64));
    if let Some(cap) = cap {
        total = total.min(cap);
    }
    let stage_seed = derive_seed(cfg.seed, &[state.stage.tag()]);
    let perturb = cfg.perturb();
    let mut cache = ImageCache::default();
    cache.preload(manifest, records.iter().copied())?;

    let mut metrics_file = match &opts.metrics {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut last_good = "none".to_string();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;

    while state.step < total {
        let step = state.step;
        let epoch = step / steps_per_epoch;
        if epoch != order_epoch {
            order = (0..records.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, &[0, epoch])));
            order_epoch = epoch;
        }
        let within = (step % steps_per_epoch) as usize;
        let idx = &order[within * batch..((within + 1) * batch).min(order.len())];
        let step_seed = derive_seed(stage_seed, &[1, step]);
        let mut examples = Vec::with_capacity(idx.len());
        for (i, &r) in idx.iter().enumerate() {
            let rec = records[r];
            let ex_seed = derive_seed(step_seed, &[2, i as u64]);
            let k = choose_k(cfg.random_k, cfg.num_refs, rec.references.len(), derive_seed(ex_seed, &[3]));
            examples.push(assemble_example(manifest, rec, k, ex_seed, &perturb, &mut cache)?);
        }
        let outcome = training_step(&mut state, &examples, step_seed).map_err(|e| match e {
            Error::NonFiniteLoss { step, .. } => Error::NonFiniteLoss {
                step,
                last_good: last_good.clone(),
            },
            other => other,
        })?;
        if step % cfg.log_interval as u64 == 0 {
            let rec = MetricRecord {
                stage: state.stage,
                step,
                epoch,
                l_sd: outcome.losses.sd,
                l_gc: outcome.losses.gc,
                l_lc: outcome.losses.lc,
                total: outcome.losses.total,
                grad_norm: outcome.grad_norm,
                config_hash: hash.clone(),
            };
            if let (Some(f), Some(p)) = (&mut metrics_file, &opts.metrics) {
                let line = serde_json::to_string(&rec).expect("metric serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            metrics.push(rec);
        }
        if let (Some(base), true) = (&opts.checkpoint, cfg.checkpoint_interval > 0) {
            if state.step % cfg.checkpoint_interval as u64 == 0 && state.step < total {
                let p = periodic_path(base, state.step);
                checkpoint::save(&state, &p)?;
                last_good = p.display().to_string();
            }
        }
    }
    if let Some(p) = &opts.checkpoint {
        checkpoint::save(&state, p)?;
    }
    Ok(TrainOutcome { state, metrics })
}

/// Pretrains on the pretrain split. A state already in the pretrain stage
/// resumes from its step counter.
pub fn pretrain<T: Scalar>(state: TrainState<T>, manifest: &DatasetManifest, opts: &RunOptions) -> Result<TrainOutcome<T>> {
    let records: Vec<&ExampleRecord> = manifest.split(Split::Pretrain).collect();
    if records.is_empty() {
        return Err(Error::Config("dataset has no pretrain split records".into()));
    }
    let epochs = state.model.config.pretrain_epochs;
    run_stage(state, manifest, &records, epochs, opts)
}

/// Finetunes the whole model on the finetune views of one object. Starts a
/// fresh stage unless `state` is already finetuning that object.
pub fn finetune<T: Scalar>(
    mut state: TrainState<T>,
    object_id: &str,
    manifest: &DatasetManifest,
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    let records: Vec<&ExampleRecord> = manifest
        .split(Split::Finetune)
        .filter(|r| r.object_id == object_id)
        .collect();
    if records.is_empty() {
        return Err(Error::Config(format!("no finetune records for object {object_id}")));
    }
    if state.stage != Stage::Finetune || state.object_id.as_deref() != Some(object_id) {
        state.begin_stage(Stage::Finetune, Some(object_id.to_string()));
    }
    let epochs = state.model.config.finetune_epochs;
    run_stage(state, manifest, &records, epochs, opts)
}

/// Reads a JSON-lines metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}
