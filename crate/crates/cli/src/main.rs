//! `landslide`: batch front end for the susceptibility pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AlignArgs, EncodeArgs, EvalArgs, GradcheckArgs, PredictArgs, RocArgs, SplitArgs, SynthArgs,
    TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "landslide",
    version,
    about = "Landslide susceptibility mapping with uphill-aligned features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file of settings; flags override its keys. A table named after the
    /// subcommand is used when present, otherwise the top level.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice (default 0, or `seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads recorded in the manifest.
    #[arg(long, global = true, env = "LANDSLIDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: DEM, base feature stack and planted labels.
    Synth(SynthArgs),
    /// Build a feature stack from categorical and continuous rasters.
    Encode(EncodeArgs),
    /// Resample selected channels at each pixel's uphill point.
    Align(AlignArgs),
    /// Tile the extent into patches and split them into train/val/test.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Stitch a full susceptibility map from a checkpoint.
    Predict(PredictArgs),
    /// NLL and AUC of a map on one split.
    Eval(EvalArgs),
    /// ROC table and plot for one or more maps.
    Roc(RocArgs),
    /// Finite-difference check of every layer's backward pass.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ctx = commands::Context {
        config: cli.config,
        seed: cli.seed,
        threads: cli.threads.unwrap_or(1).max(1),
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Encode(a) => commands::encode(&ctx, a),
        Command::Align(a) => commands::align(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Roc(a) => commands::roc(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
