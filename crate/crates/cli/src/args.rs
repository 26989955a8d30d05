//! Command-line surface. Flags mirror module parameters one-to-one.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqrec_core::data::{DEFAULT_MODE, MATCHES_FILE};
use seqrec_core::models::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "seqrec", version, about = "Next-item recommendation benchmark for in-match purchase sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw match file and store it as a dataset directory.
    Ingest(IngestArgs),
    /// Descriptive statistics before and after preprocessing.
    Stats(StatsArgs),
    /// Preprocess and split chronologically at match level.
    Split(SplitArgs),
    /// Generate a synthetic corpus with a known optimal predictor.
    Synth(SynthArgs),
    /// Train (or fit) one model and write its checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a synthetic oracle on a split.
    Eval(EvalArgs),
    /// Random hyperparameter search selected by validation Recall@3.
    Search(SearchArgs),
    /// Binned, normalised series for plotting.
    Plotdata(PlotArgs),
    /// Leaderboard CSV from evaluation reports, plus plot-data pass-through.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataFile {
    /// Dataset directory holding items.csv, heroes.csv and match files.
    #[arg(long)]
    pub data: PathBuf,
    /// Match file inside the dataset directory.
    #[arg(long, default_value = MATCHES_FILE)]
    pub file: String,
}

#[derive(Debug, Args)]
pub struct PreprocessFlags {
    /// Game mode kept by preprocessing.
    #[arg(long, default_value = DEFAULT_MODE)]
    pub mode: String,
    /// Fraction of matches trimmed from each end of the duration distribution.
    #[arg(long, default_value_t = 0.025)]
    pub trim: f64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub heroes: PathBuf,
    /// Skip and report malformed lines instead of aborting on the first one.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataFile,
    #[command(flatten)]
    pub pre: PreprocessFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataFile,
    #[arg(long, default_value_t = 0.94)]
    pub train: f64,
    #[arg(long, default_value_t = 0.01)]
    pub val: f64,
    #[arg(long, default_value_t = 0.05)]
    pub test: f64,
    #[command(flatten)]
    pub pre: PreprocessFlags,
    /// Split the matches as given, without preprocessing.
    #[arg(long)]
    pub no_preprocess: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub matches: usize,
    #[arg(long, default_value_t = 50)]
    pub items: usize,
    #[arg(long, default_value_t = 1)]
    pub heroes: usize,
    /// Scale of the transition logits (0 gives uniform rows).
    #[arg(long, default_value_t = 2.0)]
    pub sharpness: f64,
    #[arg(long, default_value_t = 0.1)]
    pub consumable_rate: f64,
    #[arg(long, default_value_t = 10.0)]
    pub mean_ls: f64,
    #[arg(long, default_value_t = 3.0)]
    pub std_ls: f64,
    #[arg(long, default_value_t = 2400.0)]
    pub mean_duration: f64,
    #[arg(long, default_value_t = 480.0)]
    pub std_duration: f64,
    /// Weight of the second-order transition table in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub second_order: f64,
    /// Non-consumable items are bought at most once per session.
    #[arg(long)]
    pub no_repeat: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

/// Architecture flags; unset flags take the model's default and flags the
/// model does not have are rejected.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: ModelKind,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub emb: Option<usize>,
    #[arg(long)]
    pub cell: Option<usize>,
    #[arg(long)]
    pub enc: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-head size; the model width is heads x head-size.
    #[arg(long)]
    pub head_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub ctx_dropout: Option<f64>,
    #[arg(long)]
    pub emb_dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Linear warmup steps (BERT4Rec).
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Cloze mask probability (BERT4Rec).
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// Maximum sequence length; derived from the training split if unset.
    #[arg(long)]
    pub l_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitFiles {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train.jsonl")]
    pub train_file: String,
    #[arg(long, default_value = "val.jsonl")]
    pub val_file: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub files: SplitFiles,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint to evaluate.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Synthetic oracle JSON to evaluate instead of a model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test.jsonl")]
    pub split_file: String,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub k: Vec<usize>,
    /// Truncate prefixes further than the model's own l_max.
    #[arg(long)]
    pub l_max: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: ModelKind,
    #[command(flatten)]
    pub files: SplitFiles,
    #[arg(long, default_value = "test.jsonl")]
    pub test_file: String,
    #[arg(long, default_value_t = 30)]
    pub trials: usize,
    /// Trials trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeriesArg {
    ItemPurchaseTime,
    MatchDuration,
    SessionLength,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub data: DataFile,
    #[arg(long, value_enum)]
    pub series: SeriesArg,
    /// Item for the item-purchase-time series.
    #[arg(long, required_if_eq("series", "item-purchase-time"))]
    pub item: Option<u32>,
    /// Bin width in seconds.
    #[arg(long, default_value_t = 60)]
    pub bin: i64,
    /// Centred rolling-mean window in bins (odd).
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Plot-data CSV files copied unchanged into `<out>/plots`.
    #[arg(long, num_args = 1..)]
    pub plots: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: seqrec_core::models::ModelError| e.to_string())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Stats(_) => "stats",
            Command::Split(_) => "split",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Search(_) => "search",
            Command::Plotdata(_) => "plotdata",
            Command::Report(_) => "report",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Ingest(a) => &a.common,
            Command::Stats(a) => &a.common,
            Command::Split(a) => &a.common,
            Command::Synth(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Search(a) => &a.common,
            Command::Plotdata(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }
}
