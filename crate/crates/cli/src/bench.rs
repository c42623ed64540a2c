//! `nted bench`: cost and wall time of the factored warp against dense
//! attention over a grid of spatial sizes.

use std::time::Instant;

use anyhow::{bail, ensure};
use log::info;
use nted::cost::{account_cost, measure, Counts, Mechanism};
use nted::kernel::{nted, vanilla_attention, FeatureMap, Projection, SemanticFilters};
use nted::spatial::Grid;
use nted::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{csv_writer, load_job, Precision, RunConfig};

pub const BENCH: &str = "bench.csv";
pub const BENCH_SCHEMA: &str = "nted.bench.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchJob {
    /// Spatial sizes `h * w`; perfect squares become square grids.
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub semantics: usize,
    pub warmups: usize,
    pub reps: usize,
    /// Largest `h * w` for which the dense baseline may run.
    pub memory_guard: usize,
}

impl Default for BenchJob {
    fn default() -> Self {
        BenchJob {
            sizes: vec![256, 1024, 4096],
            channels: 64,
            semantics: 32,
            warmups: 2,
            reps: 5,
            memory_guard: 16384,
        }
    }
}

/// One CSV row. Timing columns are empty in verification mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema: String,
    pub positions: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub precision: String,
    pub nted_macs: u64,
    pub nted_macs_analytic: u64,
    pub nted_allocs: u64,
    pub nted_allocs_analytic: u64,
    pub vanilla_macs: u64,
    pub vanilla_macs_analytic: u64,
    pub vanilla_allocs: u64,
    pub vanilla_allocs_analytic: u64,
    pub mac_ratio: f64,
    pub alloc_ratio: f64,
    pub nted_seconds: Option<f64>,
    pub vanilla_seconds: Option<f64>,
    pub time_ratio: Option<f64>,
}

fn grid_for(n: usize) -> Grid {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        Grid::square(side)
    } else {
        Grid::new(1, n)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> anyhow::Result<Tensor<T>> {
    Ok(Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0) * scale))?)
}

struct Instance<T: Real> {
    reference: FeatureMap<T>,
    target: FeatureMap<T>,
    we: SemanticFilters<T>,
    wd: SemanticFilters<T>,
    proj: Projection<T>,
}

impl<T: Real> Instance<T> {
    fn random(grid: Grid, c: usize, k: usize, seed: u64) -> anyhow::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.positions();
        let s = 1.0 / (c as f64).sqrt();
        Ok(Instance {
            reference: FeatureMap::new(grid, uniform(&mut rng, &[n, c], 1.0)?)?,
            target: FeatureMap::new(grid, uniform(&mut rng, &[n, c], 1.0)?)?,
            we: SemanticFilters::new(uniform(&mut rng, &[k, c], s)?)?,
            wd: SemanticFilters::new(uniform(&mut rng, &[k, c], s)?)?,
            proj: Projection::new(uniform(&mut rng, &[c, c], s)?, Some(uniform(&mut rng, &[1, c], s)?))?,
        })
    }

    fn run(&self, mechanism: Mechanism) -> nted::Result<FeatureMap<T>> {
        match mechanism {
            Mechanism::Nted => nted(&self.reference, &self.target, &self.we, &self.wd, &self.proj),
            Mechanism::Vanilla => vanilla_attention(&self.target, &self.reference, &self.proj),
        }
    }

    fn counts(&self, mechanism: Mechanism) -> anyhow::Result<Counts> {
        let (out, counts) = measure(|| self.run(mechanism));
        out?;
        Ok(counts)
    }

    fn seconds(&self, mechanism: Mechanism, warmups: usize, reps: usize) -> anyhow::Result<f64> {
        for _ in 0..warmups {
            std::hint::black_box(self.run(mechanism)?);
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            std::hint::black_box(self.run(mechanism)?);
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(median(times))
    }
}

pub fn run(run: &RunConfig) -> anyhow::Result<()> {
    let job: BenchJob = load_job(&run.config)?;
    let rows = match run.precision() {
        Precision::F32 => bench::<f32>(&job, run.required_seed()?, !run.verify)?,
        Precision::F64 => bench::<f64>(&job, run.required_seed()?, !run.verify)?,
    };
    let mut w = csv_writer(&run.out.join(BENCH))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Measures every size; wall time only when `timed`.
pub fn bench<T: Real>(job: &BenchJob, seed: u64, timed: bool) -> anyhow::Result<Vec<BenchRow>> {
    ensure!(job.reps >= 1 && job.channels > 0 && job.semantics > 0, "reps, channels and semantics must be positive");
    if let Some(n) = job.sizes.iter().find(|n| **n > job.memory_guard) {
        bail!(
            "h*w = {n} exceeds the memory guard of {}: dense attention would hold {} score elements",
            job.memory_guard,
            (*n as u128) * (*n as u128)
        );
    }
    let (c, k) = (job.channels, job.semantics);
    let mut rows = Vec::new();
    for (i, &n) in job.sizes.iter().enumerate() {
        let grid = grid_for(n);
        let inst: Instance<T> = Instance::random(grid, c, k, seed.wrapping_add(i as u64))?;
        let nted_counts = inst.counts(Mechanism::Nted)?;
        let vanilla_counts = inst.counts(Mechanism::Vanilla)?;
        let nted_analytic = account_cost(grid.h, grid.w, c, k, Mechanism::Nted);
        let vanilla_analytic = account_cost(grid.h, grid.w, c, k, Mechanism::Vanilla);
        ensure!(nted_counts == nted_analytic, "nted at h*w = {n}: instrumented {nted_counts:?} != analytic {nted_analytic:?}");
        ensure!(
            vanilla_counts == vanilla_analytic,
            "vanilla at h*w = {n}: instrumented {vanilla_counts:?} != analytic {vanilla_analytic:?}"
        );
        let (nted_s, vanilla_s) = if timed {
            (
                Some(inst.seconds(Mechanism::Nted, job.warmups, job.reps)?),
                Some(inst.seconds(Mechanism::Vanilla, job.warmups, job.reps)?),
            )
        } else {
            (None, None)
        };
        info!("h*w = {n}: nted {nted_s:?} s, vanilla {vanilla_s:?} s");
        rows.push(BenchRow {
            schema: BENCH_SCHEMA.into(),
            positions: n,
            h: grid.h,
            w: grid.w,
            c,
            k,
            precision: T::NAME.into(),
            nted_macs: nted_counts.multiply_adds,
            nted_macs_analytic: nted_analytic.multiply_adds,
            nted_allocs: nted_counts.element_allocations,
            nted_allocs_analytic: nted_analytic.element_allocations,
            vanilla_macs: vanilla_counts.multiply_adds,
            vanilla_macs_analytic: vanilla_analytic.multiply_adds,
            vanilla_allocs: vanilla_counts.element_allocations,
            vanilla_allocs_analytic: vanilla_analytic.element_allocations,
            mac_ratio: nted_counts.multiply_adds as f64 / vanilla_counts.multiply_adds as f64,
            alloc_ratio: nted_counts.element_allocations as f64 / vanilla_counts.element_allocations as f64,
            time_ratio: nted_s.zip(vanilla_s).map(|(a, b)| a / b),
            nted_seconds: nted_s,
            vanilla_seconds: vanilla_s,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_median() {
        assert_eq!(grid_for(1024), Grid::square(32));
        assert_eq!(grid_for(10), Grid::new(1, 10));
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn guard_refuses_large_grids() {
        let job = BenchJob {
            sizes: vec![64, 20000],
            ..Default::default()
        };
        assert!(bench::<f64>(&job, 0, false).unwrap_err().to_string().contains("memory guard"));
    }

    #[test]
    fn untimed_rows_match_formulas() {
        let job = BenchJob {
            sizes: vec![16, 64],
            channels: 8,
            semantics: 4,
            ..Default::default()
        };
        let rows = bench::<f64>(&job, 1, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.nted_seconds.is_none() && r.nted_macs == r.nted_macs_analytic));
    }
}
