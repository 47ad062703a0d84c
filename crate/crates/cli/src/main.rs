//! `tapkit`: synthesize data, train the parser, parse, evaluate, run
//! baselines and experiments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint format: TPSR v1",
    "\nfeature format: FSEQ v1",
    "\nannotation format: jsonl v1",
    "\nprediction format: jsonl v1",
);

#[derive(Debug, Parser)]
#[command(name = "tapkit", version, long_version = LONG_VERSION, about = "Temporal action parsing toolkit")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train the pattern-attention parser.
    Train(TrainArgs),
    /// Predict sub-action boundaries with a trained model.
    Parse(ParseArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Run a baseline parser.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Summarise a dataset's annotations.
    Stats(StatsArgs),
    /// Train and evaluate the unit-count / local-loss grid.
    Ablate(AblateArgs),
    /// Compare uniform, aligned and predicted segment sampling for classification.
    CompareSampling(CompareArgs),
    /// List the frames that respond most to one pattern.
    Patterns(PatternArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator settings; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory.
    #[arg(long, env = "TAPKIT_DATA_DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub model_out: PathBuf,
    /// JSON file with optional "model" and "loss" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch loss log (JSON lines). Defaults to `<model-out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub sps_units: Option<usize>,
    #[arg(long)]
    pub num_patterns: Option<usize>,
    #[arg(long)]
    pub pattern_dim: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub value_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layer_norm: bool,
    #[arg(long)]
    pub no_local_loss: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Majority-filter the representative sequence over this odd window.
    #[arg(long)]
    pub smooth_window: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    OneToOne,
    Independent,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding the ground-truth annotations.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "one-to-one")]
    pub mode: ModeArg,
    /// Average per instance instead of pooling counts.
    #[arg(long = "macro")]
    pub macro_avg: bool,
    /// CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print scores at this absolute tolerance (frames).
    #[arg(long)]
    pub at: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Per-instance k-means on frame features.
    Kmeans(KmeansArgs),
    /// Temporal convolution boundary detector.
    Tcn(TcnArgs),
}

#[derive(Debug, Args)]
pub struct KmeansArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Clusters per instance; clamped to the instance length.
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TcnArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to predict; the detector always trains on the train split.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub nms_radius: Option<usize>,
    #[arg(long)]
    pub pos_weight: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Also write the statistics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with optional "model" and "loss" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds to average over; `--seed` alone means that single seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Predicted boundaries to add a third row.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub segments: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PatternArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pattern: usize,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status for each error class.
fn exit_code(e: &tapkit::Error) -> u8 {
    use tapkit::Error::*;
    match e {
        Io { .. } => 3,
        Parse { .. } | Validation(_) | Format(_) | Json(_) => 4,
        Config(_) => 5,
        Input(_) | Dimension { .. } | Index { .. } => 6,
        Numeric(_) => 7,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
