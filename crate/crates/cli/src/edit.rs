//! `nted edit`: blends two references' textures inside a body region.

use std::path::PathBuf;

use log::info;
use nted::edit::{indicator_gap, masked_mean_color, optimize_masks, EditConfig, EditInputs, TraceRow};
use nted::ppm;
use nted::renderer::Checkpoint;
use nted::synth::{generate_pair, Pair, SynthConfig};
use nted::Real;
use serde::{Deserialize, Serialize};

use crate::{csv_writer, load_job, read_json, resolve, write_json, Precision, RunConfig};

pub const EDITED: &str = "edited.ppm";
pub const PANEL: &str = "edit_panel.ppm";
pub const MASKS: &str = "masks.json";
pub const TRACE: &str = "edit_trace.csv";
pub const SUMMARY: &str = "edit_summary.json";
pub const TRACE_SCHEMA: &str = "nted.edit_trace.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditJob {
    pub checkpoint: PathBuf,
    /// Heatmap width used to draw the target pose.
    pub sigma_px: f64,
    pub edit: EditConfig,
}

impl Default for EditJob {
    fn default() -> Self {
        EditJob {
            checkpoint: PathBuf::from(crate::train::CHECKPOINT),
            sigma_px: SynthConfig::default().sigma_px,
            edit: EditConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct TraceCsvRow {
    schema: &'static str,
    iteration: usize,
    loss: f64,
    regu: f64,
    r1: f64,
    r2: f64,
    best: f64,
    selected: usize,
    complement_selected: usize,
}

impl From<&TraceRow> for TraceCsvRow {
    fn from(r: &TraceRow) -> Self {
        TraceCsvRow {
            schema: TRACE_SCHEMA,
            iteration: r.iteration,
            loss: r.loss,
            regu: r.regu,
            r1: r.r1,
            r2: r.r2,
            best: r.best,
            selected: r.selected,
            complement_selected: r.complement_selected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksReport {
    pub logits: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rounded: Vec<Vec<u8>>,
    /// Per layer, semantics selected by the region and by its complement.
    pub region_selected: Vec<Vec<bool>>,
    pub complement_selected: Vec<Vec<bool>>,
    pub indicator_gap: f64,
}

/// Mean colors inside the edited region; each reference is measured inside
/// its own region mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionColors {
    pub reference1: [f64; 3],
    pub reference2: [f64; 3],
    pub transfer1: [f64; 3],
    pub edited: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub region: String,
    pub iterations: usize,
    pub precision: String,
    pub loss_r1: f64,
    pub loss_r2: f64,
    pub transfer1_loss_r1: f64,
    pub transfer1_loss_r2: f64,
    pub colors: RegionColors,
    /// L1 distances between mean colors.
    pub edited_to_reference1: f64,
    pub edited_to_reference2: f64,
    pub transfer1_to_reference2: f64,
}

fn l1(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn run(run: &RunConfig) -> anyhow::Result<()> {
    match run.precision() {
        Precision::F32 => edit::<f32>(run),
        Precision::F64 => edit::<f64>(run),
    }
}

fn edit<T: Real>(run: &RunConfig) -> anyhow::Result<()> {
    let job: EditJob = load_job(&run.config)?;
    let seed = run.required_seed()?;
    let ckpt: Checkpoint = read_json(&resolve(&run.config, &job.checkpoint))?;
    let renderer = ckpt.renderer()?;
    let params: Vec<nted::Tensor<T>> = ckpt.ema(&renderer)?;
    let cfg = &job.edit;
    let synth = SynthConfig {
        canvas: renderer.config().resolution,
        sigma_px: job.sigma_px,
    };
    // the run seed offsets every pair seed, so one job file covers many edits
    let pair = |s: u64| -> Pair<T> { generate_pair(s.wrapping_add(seed), &synth) };
    let (first, second, target) = (pair(cfg.reference_seeds[0]), pair(cfg.reference_seeds[1]), pair(cfg.target_seed));
    let inputs = EditInputs {
        reference1: first.reference.image.clone(),
        reference2: second.reference.image.clone(),
        heatmaps: target.target.heatmaps.clone(),
        region: target.target.mask(cfg.region).clone(),
    };
    let out = optimize_masks(&renderer, &params, &inputs, cfg)?;

    let grid = renderer.config().grid();
    ppm::write(run.out.join(EDITED), &out.edited, grid)?;
    let panel = [&inputs.reference1, &inputs.reference2, &out.transfer1, &out.transfer2, &out.edited];
    let (sheet, sheet_grid) = ppm::montage(&panel, grid, panel.len())?;
    ppm::write(run.out.join(PANEL), &sheet, sheet_grid)?;

    write_json(
        &run.out.join(MASKS),
        &MasksReport {
            logits: out.masks.logits.clone(),
            values: out.masks.values(),
            rounded: out.masks.rounded(),
            region_selected: out.selections.iter().map(|(s, _)| s.clone()).collect(),
            complement_selected: out.selections.iter().map(|(_, c)| c.clone()).collect(),
            indicator_gap: indicator_gap(&out.masks, &out.selections),
        },
    )?;

    let mut w = csv_writer(&run.out.join(TRACE))?;
    for row in &out.trace {
        w.serialize(TraceCsvRow::from(row))?;
    }
    w.flush()?;

    let colors = RegionColors {
        reference1: masked_mean_color(&inputs.reference1, first.reference.mask(cfg.region))?,
        reference2: masked_mean_color(&inputs.reference2, second.reference.mask(cfg.region))?,
        transfer1: masked_mean_color(&out.transfer1, &inputs.region)?,
        edited: masked_mean_color(&out.edited, &inputs.region)?,
    };
    let summary = EditSummary {
        region: cfg.region.name().into(),
        iterations: out.trace.len(),
        precision: T::NAME.into(),
        loss_r1: out.losses.0,
        loss_r2: out.losses.1,
        transfer1_loss_r1: out.transfer1_losses.0,
        transfer1_loss_r2: out.transfer1_losses.1,
        edited_to_reference1: l1(colors.edited, colors.reference1),
        edited_to_reference2: l1(colors.edited, colors.reference2),
        transfer1_to_reference2: l1(colors.transfer1, colors.reference2),
        colors,
    };
    info!(
        "{} edit: mean color distance to reference 2 {:.4} (plain transfer {:.4})",
        summary.region, summary.edited_to_reference2, summary.transfer1_to_reference2
    );
    write_json(&run.out.join(SUMMARY), &summary)
}
