//! `nted synth`: writes a split manifest and a preview sheet.

use log::info;
use nted::ppm;
use nted::synth::{generate_split, Pair, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::{load_job, write_json, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const PREVIEW: &str = "synth_preview.ppm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthJob {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub canvas: usize,
    pub sigma_px: f64,
    /// Pairs drawn into the preview sheet; 0 skips it.
    pub preview_pairs: usize,
}

impl Default for SynthJob {
    fn default() -> Self {
        let cfg = SynthConfig::default();
        SynthJob {
            train_pairs: 500,
            test_pairs: 50,
            canvas: cfg.canvas,
            sigma_px: cfg.sigma_px,
            preview_pairs: 8,
        }
    }
}

pub fn run(run: &RunConfig) -> anyhow::Result<()> {
    let job: SynthJob = load_job(&run.config)?;
    let cfg = SynthConfig {
        canvas: job.canvas,
        sigma_px: job.sigma_px,
    };
    let manifest = generate_split(job.train_pairs, job.test_pairs, run.required_seed()?, &cfg)?;
    write_json(&run.out.join(MANIFEST), &manifest)?;
    info!("{} train / {} test pairs", manifest.train_seeds.len(), manifest.test_seeds.len());

    let seeds: Vec<u64> = manifest.train_seeds.iter().take(job.preview_pairs).copied().collect();
    if !seeds.is_empty() {
        let pairs: Vec<Pair> = seeds.iter().map(|s| manifest.pair(*s)).collect();
        let images: Vec<_> = pairs.iter().flat_map(|p| [&p.reference.image, &p.target.image]).collect();
        let (sheet, grid) = ppm::montage(&images, nted::spatial::Grid::square(job.canvas), 8)?;
        ppm::write(run.out.join(PREVIEW), &sheet, grid)?;
    }
    Ok(())
}
