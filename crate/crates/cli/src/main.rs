//! `dropcycle` — train, evaluate, and apply the unsupervised
//! raindrop-removal model from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
//! Every run is deterministic; set `DROPCYCLE_SEED` to pin the random
//! seed regardless of config files or flags.

use std::process::ExitCode;

use clap::Parser;
use dropcycle::error::Error;

mod commands;
mod config;
mod heatmap;

#[derive(Debug, Parser)]
#[command(
    name = "dropcycle",
    version,
    about = "Unsupervised raindrop removal by layer decomposition",
    subcommand_required = true,
    arg_required_else_help = true
)]
// One short-lived instance at startup; the training variant's size is fine.
#[allow(clippy::large_enum_variant)]
enum Cli {
    /// Train a model on unpaired rainy and clean image directories
    Train(commands::TrainArgs),
    /// Score a checkpoint on a paired test set (PSNR/SSIM table)
    Eval(commands::EvalArgs),
    /// Remove raindrops from every image in a directory
    Infer(commands::InferArgs),
    /// Write per-iteration background, raindrop, mask, and
    /// reconstruction images for one input
    Decompose(commands::DecomposeArgs),
    /// Generate a synthetic rainy/clean corpus with exact ground truth
    Synth(commands::SynthArgs),
}

/// Maps error categories onto the documented exit codes.
fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) => 1,
        Error::NonFinite(_) | Error::TrainAbort { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is
            // a usage error (clap's own exit code 2 means "data" here).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli {
        Cli::Train(args) => commands::train(args),
        Cli::Eval(args) => commands::eval(args),
        Cli::Infer(args) => commands::infer(args),
        Cli::Decompose(args) => commands::decompose(args),
        Cli::Synth(args) => commands::synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
