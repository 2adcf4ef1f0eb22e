//! `slimcae` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Regime;

#[derive(Parser, Debug)]
#[command(name = "slimcae", version, about = "Switchable-width learned image codec")]
struct Cli {
    /// Verbose logging (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Encode an image into a .scae bitstream.
    Encode(EncodeArgs),
    /// Decode a .scae bitstream into an image.
    Decode(DecodeArgs),
    /// Rate-distortion and cost report of a checkpoint over an image set.
    Eval(EvalArgs),
    /// FLOP and memory accounting; needs no checkpoint.
    Cost(CostArgs),
    /// Train fixed-width baselines over a tradeoff grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the five-width configuration (widths 48..192).
    #[arg(long)]
    pub full: bool,
    /// Comma-separated widths, narrowest first.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// GDN variant: switch, slim or slim_plus.
    #[arg(long)]
    pub gdn: Option<String>,
    /// Synthetic data kind, e.g. gaussian_blobs or band_limited_noise:0.2.
    #[arg(long, conflicts_with = "manifest")]
    pub synthetic: Option<String>,
    /// Newline-separated list of PNG/PPM paths.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub val_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub entropy_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long, value_enum)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub finetune_iterations: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Steps between tradeoff updates.
    #[arg(long = "schedule-iterations")]
    pub schedule_iterations: Option<usize>,
    /// Maximum tradeoff updates per level.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Fixed-width curves (curves.json from `sweep`) for the estimated regime.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Run directory [default: $SLIMCAE_OUT or ./runs/train].
    #[arg(long, env = "SLIMCAE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// 1-based width level [default: widest].
    #[arg(long, conflicts_with = "scalable")]
    pub level: Option<usize>,
    /// Code channel groups separately so any prefix can be decoded.
    #[arg(long)]
    pub scalable: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Channel groups to decode from a scalable stream [default: all].
    #[arg(long)]
    pub levels: Option<usize>,
    /// Original image, to print PSNR.
    #[arg(long)]
    pub original: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tradeoffs for the lambda column [default: lambdas.json beside the checkpoint].
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Timed runs per level (after 3 warm-ups); 0 skips timing.
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Report directory [default: $SLIMCAE_OUT or ./runs/eval].
    #[arg(long, env = "SLIMCAE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// TOML run configuration to take the model from [default: desk model].
    #[arg(long, conflicts_with = "full")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub full: bool,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub gdn: Option<String>,
    #[arg(long, default_value_t = 768)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    /// Tradeoff grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Output directory [default: $SLIMCAE_OUT or ./runs/sweep].
    #[arg(long, env = "SLIMCAE_OUT")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cost(a) => commands::cost(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
