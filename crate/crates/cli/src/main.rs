//! `kquant`: quantize tensor containers, build importance matrices, run
//! throughput sweeps and aggregate their results.

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kquant::codecs::QuantScheme;
use kquant::kernels::KernelMode;
use kquant::tensor::{DEFAULT_INPUT_LENS, DEFAULT_OUTPUT_LEN};
use serde::Serialize;

#[derive(Parser, Serialize)]
#[command(
    name = "kquant",
    version,
    about = "Block k-quant toolkit and throughput benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Quantize a QBF1 container (or a synthetic model) under one scheme.
    Quantize(QuantizeArgs),
    /// Decode a QBF1 container back to an FP16 container.
    Dequantize(DequantizeArgs),
    /// Describe a QBF1 or QIM1 file.
    Inspect(InspectArgs),
    /// Build a QIM1 importance file from synthetic calibration activations.
    Imatrix(ImatrixArgs),
    /// Benchmark one model configuration over a grid of schemes and prompts.
    Bench(BenchArgs),
    /// Like `bench`, over several model configurations.
    Sweep(SweepArgs),
    /// Aggregate JSON-lines results into CSV tables and Pareto frontiers.
    Report(ReportArgs),
}

fn parse_scheme(s: &str) -> Result<QuantScheme, String> {
    s.parse().map_err(|e: kquant::Error| e.to_string())
}

#[derive(Args, Serialize)]
#[group(id = "source", required = true, multiple = false)]
struct Source {
    /// Input QBF1 container.
    #[arg(long = "in", group = "source")]
    input: Option<PathBuf>,
    /// Generate the weights of this model configuration (TOML) instead.
    #[arg(long, group = "source")]
    model_config: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct QuantizeArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_scheme)]
    scheme: QuantScheme,
    /// QIM1 file with per-tensor importance (looked up by tensor name).
    #[arg(long)]
    imatrix: Option<PathBuf>,
    /// Seed for generated weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct DequantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize)]
struct ImatrixArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
    /// Calibration activation vectors per tensor.
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Fused,
    Unpack,
}

impl From<Mode> for KernelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fused => KernelMode::FusedPerBlock,
            Mode::Unpack => KernelMode::UnpackThenCompute,
        }
    }
}

#[derive(Args, Serialize)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme,
          default_values_t = QuantScheme::ALL.to_vec())]
    schemes: Vec<QuantScheme>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_INPUT_LENS.to_vec())]
    input_lens: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_OUTPUT_LEN)]
    output_len: usize,
    #[arg(long, default_value_t = kquant::bench::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = kquant::bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines output; `<stem>.csv` and `<stem>.degradation.csv` are
    /// written next to it.
    #[arg(long, default_value = "bench.jsonl")]
    jsonl: PathBuf,
    /// Worker threads (default: KQUANT_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Fused)]
    mode: Mode,
    /// Skip resident-memory sampling.
    #[arg(long)]
    no_memory: bool,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model_config: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Model configuration (repeatable).
    #[arg(long = "model-config", required = true)]
    model_configs: Vec<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Also write the aggregated table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// JSON-lines results.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    /// Write the per-phase Pareto frontier here.
    #[arg(long)]
    pareto: Option<PathBuf>,
    /// Also write the aggregated table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// CSV with `model,scheme,score` columns; scores replace -RMSE as the
    /// fidelity objective.
    #[arg(long)]
    scores: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    eprintln!(
        "kquant config: {}",
        serde_json::to_string(&cli.command).unwrap_or_default()
    );
    let outcome = match &cli.command {
        Command::Quantize(a) => commands::quantize(a),
        Command::Dequantize(a) => commands::dequantize(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Imatrix(a) => commands::imatrix(a),
        Command::Bench(a) => commands::bench(std::slice::from_ref(&a.model_config), &a.grid, None),
        Command::Sweep(a) => commands::bench(&a.model_configs, &a.grid, a.json.as_deref()),
        Command::Report(a) => commands::report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
