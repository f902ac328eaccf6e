//! `rs3mamba`: inference, evaluation, complexity counts, scan benchmark and
//! self-check for the dual-branch segmentation network.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use report::RunReport;

#[derive(Parser, Debug)]
#[command(name = "rs3mamba", version, about = "Dual-branch remote-sensing segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Key-value config file; the default configuration when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment an image with sliding-window inference.
    Infer(InferArgs),
    /// Score a predicted id map against ground truth.
    Eval(EvalArgs),
    /// Print parameter and FLOP breakdowns.
    Count(CountArgs),
    /// Time the sequential and scan evaluations over sequence lengths.
    BenchScan(BenchArgs),
    /// Run the invariant suite.
    Selfcheck(SelfcheckArgs),
    /// Write a randomly initialised weight archive.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// PPM (P6) or `.rtn` `[H, W, 3]` image.
    #[arg(long)]
    pub image: PathBuf,
    /// `.rs3w` archive; without it weights are drawn from `--seed`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = rs3mamba::data::tiling::DEFAULT_TILE)]
    pub tile: usize,
    #[arg(long, default_value_t = rs3mamba::data::tiling::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Id map output (P5).
    #[arg(long)]
    pub out_pred: PathBuf,
    /// Palette-coloured output (P6).
    #[arg(long)]
    pub out_color: Option<PathBuf>,
    /// `vaihingen`, `loveda` or a palette file.
    #[arg(long, default_value = "vaihingen")]
    pub palette: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted id map (P5).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: id map (P5) or colour label image (P6).
    #[arg(long)]
    pub gt: PathBuf,
    /// `vaihingen`, `loveda` or a palette file.
    #[arg(long, default_value = "vaihingen")]
    pub palette: String,
    /// Comma-separated class ids; defaults to the palette's evaluated set.
    #[arg(long, value_delimiter = ',')]
    pub classes_eval: Option<Vec<usize>>,
    /// Also write the per-class scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also count FLOPs for `H W BATCH`.
    #[arg(long, num_args = 3, value_names = ["H", "W", "BATCH"])]
    pub flops: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768, 65536])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    #[arg(long, default_value_t = 16)]
    pub d_inner: usize,
    #[arg(long, default_value_t = 16)]
    pub n_state: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RS3_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RS3_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(report::EXIT_USAGE);
    }
    let (name, result) = match &cli.command {
        Command::Infer(a) => ("infer", commands::infer(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::Count(a) => ("count", commands::count(a)),
        Command::BenchScan(a) => ("bench-scan", commands::bench_scan(a)),
        Command::Selfcheck(a) => ("selfcheck", commands::selfcheck(a)),
        Command::Init(a) => ("init", commands::init(a)),
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => RunReport::failed(name, e),
    };
    report.emit()
}
