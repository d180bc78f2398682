use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use selfres_cli::{
    apply_overrides, parse_grid, run_benchmark, sweep, Overrides, RunRequest, SweepDimension,
};

/// Benchmark driver for the self-reflective sampling engine.
#[derive(Parser)]
#[command(name = "selfres", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over its seed range.
    Run(CommonArgs),
    /// Run a sweep over one dimension of the base configuration.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run request JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path (rows are appended).
    #[arg(long)]
    out: PathBuf,
    /// Total sampled frames T.
    #[arg(long, value_name = "T")]
    frames: Option<usize>,
    /// Frames per reflection path S.
    #[arg(long, value_name = "S")]
    segment: Option<usize>,
    /// Reflection layer depth (1-based).
    #[arg(long, value_name = "L")]
    layer: Option<usize>,
    /// Visual tokens kept at convergence.
    #[arg(long, value_name = "K")]
    keep: Option<usize>,
    /// regular | smooth
    #[arg(long)]
    mode: Option<String>,
    /// reassigned | dup | inc | single
    #[arg(long)]
    pos: Option<String>,
    /// batch | seq
    #[arg(long)]
    exec: Option<String>,
    /// Seed range a..b (half-open).
    #[arg(long, value_name = "A..B")]
    seeds: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// layer | context | strategy
    #[arg(long)]
    dim: String,
    /// Comma-separated grid; context entries are S:T pairs.
    #[arg(long)]
    grid: String,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            frames_t: self.frames,
            segment_s: self.segment,
            reflection_layer: self.layer,
            keep: self.keep,
            mode: self.mode.clone(),
            position_strategy: self.pos.clone(),
            exec: self.exec.clone(),
            seeds: self.seeds.clone(),
        }
    }

    fn request(&self) -> Result<RunRequest> {
        let request = RunRequest::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        apply_overrides(request, &self.overrides())
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let request = args.request()?;
            let rows = run_benchmark(&request, &args.out)?;
            println!("wrote {} rows to {}", rows.len(), args.out.display());
        }
        Command::Sweep(args) => {
            let request = args.common.request()?;
            let dimension = SweepDimension::from_str(&args.dim)?;
            let grid = parse_grid(dimension, &args.grid)?;
            let rows = sweep(&request, dimension, &grid, &args.common.out)?;
            println!("wrote {} rows to {}", rows.len(), args.common.out.display());
        }
    }
    Ok(())
}
