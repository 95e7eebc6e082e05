mod commands;
mod records;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Scene-graph supervised vision-language training on synthetic shapes.
#[derive(Debug, Parser)]
#[command(name = "sgvl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes, image-caption pairs or swap pairs.
    SynthData(SynthArgs),
    /// Random-walk subgraphs with crop-and-densify and the size filter.
    Preprocess(RulesArgs),
    /// One positive and one graph-based negative caption per graph.
    Captions(RulesArgs),
    /// Every applicable negative-rule mutation of each graph.
    Negatives(RulesArgs),
    /// Contrastive stage-0 training of a fresh base model.
    PretrainBase(PretrainArgs),
    /// Adapter finetuning of a base checkpoint.
    Train(TrainArgs),
    /// Text, image and group scores on swap pairs.
    EvalWinoground(WinogroundArgs),
    /// Detection mAP of the object tokens.
    EvalMap(MapArgs),
    /// Finite-difference check of every loss term.
    Gradcheck(GradcheckArgs),
    /// Summarise a checkpoint or JSONL artifact.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Image / scene-graph pairs.
    Sg,
    /// Image / caption pairs.
    Text,
    /// Relation- and attribute-swap pairs.
    Winoground,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "sg")]
    kind: SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic world configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RulesArgs {
    /// Scene-graph JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Negative-rule configuration (JSON); defaults to the synthetic world's rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Image-caption JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Model configuration (JSON).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Stage-0 checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Image-caption JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Scene-graph JSONL.
    #[arg(long)]
    sg: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Components to enable, a comma list of gt, gn and sg; empty for the baseline.
    #[arg(long, default_value = "gt,gn,sg")]
    ablation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WinogroundArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Swap-pair JSONL; generated from --config and --seed when absent.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene-graph JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Model configuration (JSON); the tiny configuration when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Write the re-serialized artifact here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and executes the command. Returns the
/// process exit code: 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(commands::Failure::Check(msg)) => {
            eprintln!("{msg}");
            1
        }
    }
}
