//! Command-line pipeline: synthesize a dataset, regrid stations, fill
//! satellite gaps, train and evaluate the regressor, and export figure data.
//!
//! Every subcommand writes a `key = value` manifest next to its outputs with
//! the resolved arguments, so any run can be reproduced bit-identically by
//! re-invoking the recorded argv.

mod commands;
mod kv;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "gridfuse",
    version,
    about = "Satellite-ground fusion and transformer regression for gridded air-quality data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic satellite/ground dataset
    Synth(commands::synth::SynthArgs),
    /// Regrid station observations and fill satellite gaps
    Fuse(commands::fuse::FuseArgs),
    /// Train the regressor under five-fold cross-validation
    Train(commands::train::TrainArgs),
    /// Score a checkpoint on chosen days
    Eval(commands::eval::EvalArgs),
    /// Per-cell linear regression baseline over the same folds
    Baseline(commands::baseline::BaselineArgs),
    /// Export heatmaps and scatter data
    Export(commands::export::ExportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Fuse(args) => commands::fuse::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Baseline(args) => commands::baseline::run(args),
        Command::Export(args) => commands::export::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
