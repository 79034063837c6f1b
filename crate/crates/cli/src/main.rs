//! `cdformer`: data generation, training, evaluation, benchmarks and
//! gradient checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cdformer::bench::Kernel;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Precision;

#[derive(Parser, Debug)]
#[command(name = "cdformer", version, about = "Collect-and-distribute point cloud transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset of `cdpc` files plus a manifest.
    GenData(GenDataArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time attention kernels against point count.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Cls,
    Seg,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Shape families for classification (the first N of the catalogue).
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=12))]
    pub classes: u64,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Replaces the schedule with a cosine schedule from this rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Continue from a `last` checkpoint; its parent becomes the output
    /// directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Kernels to time (default: all four).
    #[arg(long, value_delimiter = ',', value_parser = parse_kernel)]
    pub kernels: Vec<Kernel>,
    #[arg(long, value_delimiter = ',', default_values_t = cdformer::bench::DEFAULT_NS)]
    pub ns: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub s: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_kernel(s: &str) -> Result<Kernel, String> {
    s.parse().map_err(|e: cdformer::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Restrict to one module: tensor, attention or model.
    #[arg(long)]
    pub module: Option<String>,
    /// Perturbs one analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
