use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "arin", version, about = "Blind inpainting: train, restore, evaluate and sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or degrade) a triplet dataset: clean/, mask/, deteriorated/
    SynthData(SynthArgs),
    /// Train the resampler and upscaler jointly
    TrainCar(TrainCarArgs),
    /// Train the two-stage restorer
    TrainHinet(TrainHinetArgs),
    /// Restore one image
    Restore(RestoreArgs),
    /// Evaluate a variant on a triplet dataset
    Evaluate(EvaluateArgs),
    /// Evaluate variants under noise and JPEG overlays
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config: count, height, width, seed, degradation
    #[arg(long)]
    config: Option<PathBuf>,
    /// Degrade the PNGs in this directory instead of generating images
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Comma-separated checkpoint iterations
    #[arg(long, value_delimiter = ',')]
    checkpoint_at: Option<Vec<usize>>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Args)]
struct TrainCarArgs {
    /// Triplet dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the training log
    #[arg(long)]
    out: PathBuf,
    /// JSON config: {"car": {...}, "train": {...}}
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct TrainHinetArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config: {"hinet": {...}, "train": {...}, "stage_input": ...}
    #[arg(long)]
    config: Option<PathBuf>,
    /// deteriorated or car_outputs
    #[arg(long)]
    mode: Option<String>,
    /// CAR checkpoint (required in car_outputs mode)
    #[arg(long)]
    car: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct ModelArgs {
    /// car, hinet_db, hinet_dr or arin
    #[arg(long)]
    variant: String,
    #[arg(long)]
    car: Option<PathBuf>,
    #[arg(long)]
    hinet: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving report.csv and report.json
    #[arg(long)]
    out: PathBuf,
    /// External LPIPS scorer, called as `<cmd> reference.png test.png`
    #[arg(long)]
    lpips_cmd: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep spec: overlays, variants, seed
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    car: Option<PathBuf>,
    /// Restorer trained on deteriorated inputs
    #[arg(long)]
    hinet_db: Option<PathBuf>,
    #[arg(long)]
    hinet_dr: Option<PathBuf>,
    /// Restorer trained on CAR outputs
    #[arg(long)]
    hinet_arin: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lpips_cmd: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::TrainCar(a) => commands::train_car(a),
        Command::TrainHinet(a) => commands::train_hinet(a),
        Command::Restore(a) => commands::restore(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
