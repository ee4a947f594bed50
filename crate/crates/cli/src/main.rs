//! `tempme`: token counts, GFLOPs, live forward traces, ablations,
//! toy training, throughput benchmarks and data export.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 runtime failure
//! (divergence, I/O).

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::output::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Parser, Debug)]
#[command(
    name = "tempme",
    version,
    about = "Progressive temporal token merging: analysis, benchmarking and toy training"
)]
pub struct Cli {
    /// Report format on stdout (or in --output)
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    pub format: Format,

    /// Write the report here instead of stdout. Relative paths resolve
    /// against $TEMPME_OUTPUT_DIR when it is set.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

/// Model and schedule selection shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// b32 | b16 | toy | micro (default: b32 for analysis, toy for
    /// bench, micro for train)
    #[arg(long)]
    pub preset: Option<String>,

    /// Merge schedule, e.g. "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9". Missing
    /// ratios take the preset's values; omitted entirely, the preset's
    /// default schedule is used.
    #[arg(long)]
    pub schedule: Option<String>,

    /// Override the preset's frame count (must equal the schedule's).
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Predicted token counts per layer
    Tokens(ModelArgs),
    /// GFLOPs of the video backbone against the no-merge baseline
    Flops(ModelArgs),
    /// Live forward pass on synthetic weights and data
    Forward(ForwardArgs),
    /// Progressive, holistic, partial and early-start fusion variants
    Ablate(AblateArgs),
    /// Train adapters and clip positional tables on synthetic pairs
    Train(TrainArgs),
    /// Wall-clock throughput of a schedule against the identity schedule
    Bench(BenchArgs),
    /// Generate a synthetic paired dataset into a tensor container
    Synth(SynthArgs),
    /// Write seeded backbone weights into a tensor container
    ExportWeights(ExportArgs),
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Load backbone weights from a container instead of seeding them
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Run at this width (b32/b16 default to 64; token counts do not
    /// depend on width)
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Run b32/b16 at their real width
    #[arg(long)]
    pub full_width: bool,
    /// Temporal redundancy of the synthetic input video, in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    pub redundancy: f64,
    /// Encode the units of a layer on the thread pool
    #[arg(long)]
    pub parallel: bool,
    /// Write the final-token merge map (JSON) to this path
    #[arg(long)]
    pub export_merge_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, default_value = "b32")]
    pub preset: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0.8)]
    pub redundancy: f64,
    #[arg(long)]
    pub parallel: bool,
    /// Line-delimited JSON training log
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Save the trained adapters and positional tables
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encode the videos of a batch on the thread pool
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub redundancy: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Container path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Container path
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let report = match &cli.command {
        Command::Tokens(a) => commands::tokens(a)?,
        Command::Flops(a) => commands::flops(a)?,
        Command::Forward(a) => commands::forward(a)?,
        Command::Ablate(a) => commands::ablate(a)?,
        Command::Train(a) => commands::train(a)?,
        Command::Bench(a) => commands::bench(a)?,
        Command::Synth(a) => commands::synth(a)?,
        Command::ExportWeights(a) => commands::export_weights(a)?,
    };
    output::emit(&report, cli.format, cli.output.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
