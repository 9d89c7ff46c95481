use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use composer_core::{Error, KEYS};

mod commands;

/// Exit status for a gradient check above tolerance and other failures.
const EXIT_FAILURE: u8 = 1;
/// Invalid configuration or dataset.
const EXIT_CONFIG: u8 = 2;
/// Unreadable or inconsistent checkpoint.
const EXIT_CHECKPOINT: u8 = 3;
/// Requested clip is not in the dataset.
const EXIT_UNKNOWN_CLIP: u8 = 4;

fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from(
        "Config keys (for --config files as `key = value` lines, or --ablate key=value;\n\
         the section prefix may be dropped when unambiguous):\n",
    );
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:width$}  {doc}\n"));
    }
    s.push_str(
        "\nExit codes: 0 success, 1 gradient check failed or other error, 2 config or data error,\n\
         3 checkpoint error, 4 unknown clip id",
    );
    s
}

#[derive(Debug, Parser)]
#[command(name = "composer", version, about = "Multiscale transformer for keypoint group activity recognition")]
#[command(after_help = keys_help())]
struct Cli {
    /// Overrides `train.seed` (and the generator seed for synth-gen).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock fields so repeated runs produce identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Config file with every key; defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// `key=value` override applied after the config; repeatable.
    #[arg(long = "ablate", global = true, value_name = "KEY=VALUE")]
    ablate: Vec<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on an NDJSON dataset; writes metrics.csv, config.cfg, summary.json and checkpoint/.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints JSON to stdout.
    Eval(EvalArgs),
    /// Write every encoder's attention for one clip as JSON.
    ExportAttention(ExportArgs),
    /// Compare analytic gradients of the full objective with central differences.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic 4-class dataset.
    SynthGen(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Clips file; `manifest.json` must sit next to it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Every N-th clip is held out for validation; 0 trains on everything.
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clip_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Clips to check on; a small synthetic batch is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Print the full report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Clips file to write; `manifest.json` is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    n_clips: usize,
    #[arg(long, default_value_t = 5)]
    persons: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 2.0)]
    noise_px: f64,
    #[arg(long, default_value_t = 1920)]
    width: u32,
    #[arg(long, default_value_t = 1080)]
    height: u32,
    #[arg(long, default_value_t = 1.0)]
    distractor_p: f64,
}

/// Failures that end the process with a specific status.
#[derive(Debug)]
enum Failure {
    Core(Error),
    GradCheck { max_rel_err: f64, tol: f64 },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

macro_rules! via_core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Core(e.into())
            }
        }
    )*};
}

via_core_error!(
    composer_core::ConfigError,
    composer_core::DatasetError,
    composer_core::CheckpointError,
    composer_core::ModelError
);

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::GradCheck { .. } => EXIT_FAILURE,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Dataset(_) => EXIT_CONFIG,
                Error::Checkpoint(_) => EXIT_CHECKPOINT,
                Error::UnknownClip(_) => EXIT_UNKNOWN_CLIP,
                Error::Model(_) | Error::Io { .. } => EXIT_FAILURE,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::GradCheck { max_rel_err, tol } => {
                write!(f, "gradient check failed: max relative error {max_rel_err:.3e} > {tol:.1e}")
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
