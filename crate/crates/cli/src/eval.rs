//! `nted eval`: test-split metrics and a sample sheet for a checkpoint.

use std::path::PathBuf;

use nted::ppm;
use nted::renderer::{evaluate, Checkpoint, TrainSample};
use nted::Real;
use serde::{Deserialize, Serialize};

use crate::train::{load_manifest, samples};
use crate::{csv_writer, load_job, read_json, resolve, Precision, RunConfig};

pub const EVAL: &str = "eval.csv";
pub const SHEET: &str = "eval_samples.ppm";
pub const EVAL_SCHEMA: &str = "nted.eval.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalJob {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    /// Evaluate the running average rather than the raw weights.
    pub use_ema: bool,
    /// Test pairs drawn as reference / target / output rows; 0 skips.
    pub preview_pairs: usize,
}

impl Default for EvalJob {
    fn default() -> Self {
        EvalJob {
            manifest: PathBuf::from(crate::synth::MANIFEST),
            checkpoint: PathBuf::from(crate::train::CHECKPOINT),
            use_ema: true,
            preview_pairs: 6,
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalRow {
    schema: &'static str,
    steps: u64,
    params: &'static str,
    precision: &'static str,
    samples: usize,
    pixel_l1: f64,
    attn_l1: f64,
    identity_l1: f64,
    pixel_to_identity: f64,
}

pub fn run(run: &RunConfig) -> anyhow::Result<()> {
    match run.precision() {
        Precision::F32 => eval::<f32>(run),
        Precision::F64 => eval::<f64>(run),
    }
}

fn eval<T: Real>(run: &RunConfig) -> anyhow::Result<()> {
    let job: EvalJob = load_job(&run.config)?;
    let manifest = load_manifest(&resolve(&run.config, &job.manifest))?;
    let ckpt: Checkpoint = read_json(&resolve(&run.config, &job.checkpoint))?;
    let renderer = ckpt.renderer()?;
    let params: Vec<nted::Tensor<T>> = if job.use_ema { ckpt.ema(&renderer)? } else { ckpt.params(&renderer)? };
    let test: Vec<TrainSample<T>> = samples(&manifest, &manifest.test_seeds, renderer.config())?;
    let m = evaluate(&renderer, &params, &test)?;

    let mut w = csv_writer(&run.out.join(EVAL))?;
    w.serialize(EvalRow {
        schema: EVAL_SCHEMA,
        steps: ckpt.adam.steps_taken(),
        params: if job.use_ema { "ema" } else { "raw" },
        precision: T::NAME,
        samples: m.samples,
        pixel_l1: m.pixel_l1,
        attn_l1: m.attn_l1,
        identity_l1: m.identity_l1,
        pixel_to_identity: if m.identity_l1 > 0.0 { m.pixel_l1 / m.identity_l1 } else { f64::NAN },
    })?;
    w.flush()?;

    let shown = &test[..job.preview_pairs.min(test.len())];
    if !shown.is_empty() {
        let outputs = shown
            .iter()
            .map(|s| renderer.render(&params, &s.heatmaps, &s.reference).map(|r| r.image))
            .collect::<nted::Result<Vec<_>>>()?;
        let images: Vec<_> = shown.iter().zip(&outputs).flat_map(|(s, o)| [&s.reference, &s.target, o]).collect();
        let (sheet, grid) = ppm::montage(&images, renderer.config().grid(), 3)?;
        ppm::write(run.out.join(SHEET), &sheet, grid)?;
    }
    Ok(())
}
