use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harmonizer_core::dataset::Split;
use harmonizer_core::ErrorCategory;

mod commands;
mod frames;

#[derive(Debug, Parser)]
#[command(
    name = "harmonizer",
    version,
    about = "Temporally coherent video harmonization: dataset synthesis, training, inference and evaluation"
)]
pub struct Cli {
    /// Seed threaded through every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Config file (JSON or TOML) for the subcommand. Keys not given keep
    /// their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set weights.lambda1=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a paired video harmonization dataset.
    Synth(SynthArgs),
    /// Train the generator and the pixel-wise discriminator.
    Train(TrainArgs),
    /// Harmonize a directory of PNG frames.
    Harmonize(HarmonizeArgs),
    /// Predict disharmony masks for a directory of PNG frames.
    PredictMask(PredictMaskArgs),
    /// Score a model (or the raw composites) on a dataset split.
    Eval(EvalArgs),
    /// Aggregate ranking ballots into Plackett-Luce scores.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Source corpus index: JSON array or CSV of `id, image, mask`.
    #[arg(long, value_name = "PATH", conflicts_with = "procedural")]
    pub sources: Option<PathBuf>,

    /// Generate this many procedural sources instead of reading a corpus.
    /// They are cached under `$HARMONIZER_CACHE` when it is set.
    #[arg(long, value_name = "COUNT")]
    pub procedural: Option<usize>,

    /// Dataset output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Resize sources to `N x N` before synthesis.
    #[arg(long, value_name = "N")]
    pub resolution: Option<usize>,

    /// Number of training pairs.
    #[arg(long)]
    pub train: Option<usize>,

    /// Number of validation pairs.
    #[arg(long)]
    pub val: Option<usize>,

    /// Number of test pairs.
    #[arg(long)]
    pub test: Option<usize>,

    /// Synthesize samples on all cores. Output is identical either way.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or its `manifest.json`.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    /// Directory for logs and checkpoints.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Training resolution (square); must be divisible by `2^depth`.
    #[arg(long, value_name = "N")]
    pub resolution: Option<usize>,

    /// Resume from this checkpoint, optimizer state included.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Stop after this many steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,

    /// Keep preprocessed training pairs in memory between epochs.
    #[arg(long)]
    pub cache_samples: bool,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// Directory of PNG frames, processed in filename order.
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,

    /// Directory of masks with the same filenames as the frames.
    #[arg(
        long,
        value_name = "DIR",
        required_unless_present = "mask_free",
        conflicts_with = "mask_free"
    )]
    pub mask_dir: Option<PathBuf>,

    /// Use the discriminator's disharmony map in place of a mask.
    #[arg(long)]
    pub mask_free: bool,

    /// Trained checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    /// Output directory; frames keep their filenames.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictMaskArgs {
    /// Directory of PNG frames.
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,

    /// Trained checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    /// Output directory for grayscale masks with the frames' filenames.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or its `manifest.json`.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,

    /// Checkpoint to score. Without one the unharmonized composites are
    /// scored.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Harmonize with predicted masks instead of the ground-truth masks.
    #[arg(long, requires = "checkpoint")]
    pub mask_free: bool,

    /// Directory of `<sample id>.flo` files from an external flow
    /// estimator; enables the estimated-flow temporal error.
    #[arg(long, value_name = "DIR")]
    pub flows: Option<PathBuf>,

    /// Resize samples to `N x N` before scoring.
    #[arg(long, value_name = "N")]
    pub resolution: Option<usize>,

    /// Write the JSON report here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// CSV with one ballot per row, best method first.
    #[arg(long, value_name = "PATH")]
    pub ballots: PathBuf,

    /// Write the fit as JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// A mistake in how the tool was invoked, as opposed to bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn category(err: &anyhow::Error) -> ErrorCategory {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return ErrorCategory::Usage;
        }
        if let Some(e) = cause.downcast_ref::<harmonizer_core::Error>() {
            return e.category();
        }
    }
    ErrorCategory::Data
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error[usage]: {} (see --help)", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = category(&e);
            eprintln!("error[{}]: {}", cat.as_str(), one_line(&format!("{e:#}")));
            ExitCode::from(exit_code(cat))
        }
    }
}
