//! `nted train`: fits the renderer on a manifest's train split.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use nted::renderer::{evaluate, Checkpoint, EvalMetrics, Renderer, RendererConfig, TrainConfig, TrainSample, Trainer};
use nted::synth::Manifest;
use nted::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{csv_writer, load_job, read_json, resolve, write_json, Precision, RunConfig};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const TRAIN_LOG_SCHEMA: &str = "nted.train_log.v1";
pub const METRICS_SCHEMA: &str = "nted.metrics.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub manifest: PathBuf,
    pub renderer: RendererConfig,
    pub train: TrainConfig,
    /// Evaluate on the test split every this many steps; 0 evaluates only
    /// before and after training.
    pub eval_every: usize,
    /// Continue from this checkpoint; its config hash must match.
    pub resume: Option<PathBuf>,
    /// Stop early once this many seconds have passed. Ignored in
    /// verification mode.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            manifest: PathBuf::from(crate::synth::MANIFEST),
            renderer: RendererConfig::default(),
            train: TrainConfig::default(),
            eval_every: 0,
            resume: None,
            time_budget_secs: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct LogRow {
    schema: &'static str,
    step: u64,
    loss: f64,
    attn: f64,
    rec: f64,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    schema: &'static str,
    step: u64,
    params: &'static str,
    samples: usize,
    pixel_l1: f64,
    attn_l1: f64,
    identity_l1: f64,
}

impl MetricsRow {
    fn new(step: u64, params: &'static str, m: EvalMetrics) -> Self {
        MetricsRow {
            schema: METRICS_SCHEMA,
            step,
            params,
            samples: m.samples,
            pixel_l1: m.pixel_l1,
            attn_l1: m.attn_l1,
            identity_l1: m.identity_l1,
        }
    }
}

pub(crate) fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    if !path.exists() {
        bail!("manifest {} not found; run `nted synth` first", path.display());
    }
    let m: Manifest = read_json(path)?;
    m.validate()?;
    Ok(m)
}

pub(crate) fn samples<T: Real>(manifest: &Manifest, seeds: &[u64], rc: &RendererConfig) -> anyhow::Result<Vec<TrainSample<T>>> {
    if manifest.canvas != rc.resolution {
        bail!("manifest canvas {} differs from renderer resolution {}", manifest.canvas, rc.resolution);
    }
    seeds
        .iter()
        .map(|s| TrainSample::from_pair(&manifest.pair(*s), rc).map_err(Into::into))
        .collect()
}

/// Sample indices of one epoch; each epoch has its own stream so a resumed
/// run sees the same order as an uninterrupted one.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let start = step * batch as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (start..start + batch as u64)
        .map(|i| {
            let epoch = i / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(seed, epoch, n)));
            }
            cached.as_ref().expect("filled above").1[(i % n as u64) as usize]
        })
        .collect()
}

pub fn run(run: &RunConfig) -> anyhow::Result<()> {
    match run.precision() {
        Precision::F32 => train::<f32>(run),
        Precision::F64 => train::<f64>(run),
    }
}

fn train<T: Real>(run: &RunConfig) -> anyhow::Result<()> {
    let job: TrainJob = load_job(&run.config)?;
    let seed = run.required_seed()?;
    let manifest = load_manifest(&resolve(&run.config, &job.manifest))?;
    let renderer = Renderer::new(job.renderer.clone())?;
    let mut trainer: Trainer<T> = match &job.resume {
        Some(path) => {
            let ckpt: Checkpoint = read_json(&resolve(&run.config, path))?;
            let mut t = Trainer::from_checkpoint(renderer.clone(), &ckpt).context("resuming")?;
            t.config.steps = job.train.steps;
            t
        }
        None => Trainer::new(renderer.clone(), job.train.clone(), seed)?,
    }
    .with_threads(run.threads());

    let train_set: Vec<TrainSample<T>> = samples(&manifest, &manifest.train_seeds, &job.renderer)?;
    let test_set: Vec<TrainSample<T>> = samples(&manifest, &manifest.test_seeds, &job.renderer)?;
    if train_set.is_empty() {
        bail!("manifest has no training pairs");
    }
    info!(
        "{} params, {} train / {} test pairs, {} threads, {}",
        renderer.layout().parameter_count(),
        train_set.len(),
        test_set.len(),
        run.threads(),
        T::NAME
    );

    let mut log = csv_writer(&run.out.join(TRAIN_LOG))?;
    let mut metrics = csv_writer(&run.out.join(METRICS))?;
    let mut report = |step: u64, trainer: &Trainer<T>| -> anyhow::Result<()> {
        let ema = evaluate(&renderer, &trainer.ema, &test_set)?;
        let raw = evaluate(&renderer, &trainer.params, &test_set)?;
        info!("step {step}: ema pixel L1 {:.4} (identity {:.4}), attn {:.4}", ema.pixel_l1, ema.identity_l1, ema.attn_l1);
        metrics.serialize(MetricsRow::new(step, "ema", ema))?;
        metrics.serialize(MetricsRow::new(step, "raw", raw))?;
        metrics.flush()?;
        Ok(())
    };

    report(trainer.steps_taken(), &trainer)?;
    let budget = if run.verify { None } else { job.time_budget_secs };
    let started = Instant::now();
    let batch = trainer.config.batch_size;
    while trainer.steps_taken() < trainer.config.steps as u64 {
        let step = trainer.steps_taken();
        let picks: Vec<&TrainSample<T>> = batch_indices(seed, step, batch, train_set.len()).into_iter().map(|i| &train_set[i]).collect();
        let stats = trainer.train_step(&picks)?;
        log.serialize(LogRow {
            schema: TRAIN_LOG_SCHEMA,
            step: stats.step,
            loss: stats.loss,
            attn: stats.attn,
            rec: stats.rec,
        })?;
        let done = stats.step;
        if job.eval_every > 0 && done % job.eval_every as u64 == 0 && done < trainer.config.steps as u64 {
            report(done, &trainer)?;
        }
        if let Some(limit) = budget {
            if started.elapsed().as_secs_f64() > limit {
                warn!("time budget of {limit} s reached after {done} steps");
                break;
            }
        }
    }
    log.flush()?;
    info!("trained {} steps in {:.1} s", trainer.steps_taken(), started.elapsed().as_secs_f64());
    report(trainer.steps_taken(), &trainer)?;
    write_json(&run.out.join(CHECKPOINT), &trainer.checkpoint())
}
