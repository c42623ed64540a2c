//! Command-line jobs over the `nted` library.
//!
//! Each subcommand reads a JSON job file, writes its artifacts into an
//! output directory and can be driven either from the `nted` binary or
//! directly through [`run`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod bench;
pub mod edit;
pub mod eval;
pub mod synth;
pub mod train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Bench,
    Edit,
}

impl Command {
    fn needs_seed(self) -> bool {
        matches!(self, Command::Train | Command::Bench | Command::Edit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Defaults to f32 for training and editing, f64 elsewhere.
    pub precision: Option<Precision>,
    pub threads: usize,
    /// Single thread, f64, no wall-clock dependent output.
    pub verify: bool,
}

impl RunConfig {
    pub fn new(command: Command, config: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            config: config.into(),
            seed: None,
            out: out.into(),
            precision: None,
            threads: 1,
            verify: false,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn verify(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn precision(&self) -> Precision {
        if self.verify {
            return Precision::F64;
        }
        self.precision.unwrap_or(match self.command {
            Command::Train | Command::Eval | Command::Edit => Precision::F32,
            Command::Synth | Command::Bench => Precision::F64,
        })
    }

    pub fn threads(&self) -> usize {
        if self.verify {
            1
        } else {
            self.threads.max(1)
        }
    }

    /// The seed, or an error for subcommands that must not fall back to one.
    pub fn required_seed(&self) -> anyhow::Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None if self.command.needs_seed() => bail!("--seed is required for {:?}", self.command),
            None => Ok(0),
        }
    }
}

/// True when `NTED_VERIFY=1` is set.
pub fn verify_from_env() -> bool {
    std::env::var("NTED_VERIFY").is_ok_and(|v| v == "1")
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.required_seed()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cfg.command {
        Command::Synth => synth::run(cfg),
        Command::Train => train::run(cfg),
        Command::Eval => eval::run(cfg),
        Command::Bench => bench::run(cfg),
        Command::Edit => edit::run(cfg),
    }
}

/// Parses a JSON job file. An empty path gives the defaults.
pub(crate) fn load_job<J: DeserializeOwned + Default>(path: &Path) -> anyhow::Result<J> {
    if path.as_os_str().is_empty() {
        return Ok(J::default());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Resolves `p` against the directory holding the job file.
pub(crate) fn resolve(job: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    job.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_json<D: DeserializeOwned>(path: &Path) -> anyhow::Result<D> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// CSV writer whose rows all start with a schema id column.
pub(crate) fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}
