use std::path::PathBuf;

use clap::Parser;
use nted_cli::{run, verify_from_env, Command, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "nted", version, about = "Texture extraction/distribution renderer: data, training, benchmarks and editing")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON job file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = RunConfig {
        command: cli.command,
        config: cli.config.unwrap_or_default(),
        seed: cli.seed,
        out: cli.out,
        precision: cli.precision,
        threads: cli.threads,
        verify: verify_from_env(),
    };
    if cfg.verify {
        log::info!("verification mode: f64, one thread");
    }
    run(&cfg)
}
