//! Command-line pipeline: phantom generation, preprocessing, training,
//! ensemble prediction, evaluation, overlays and cross-validation.

pub mod commands;
pub mod config;
pub mod crossval;
pub mod data;
pub mod overlay;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "vncseg", version, about = "Cardiac structure segmentation for low-contrast CT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic paired-domain datasets
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Smooth, resample and window a dataset
    Preprocess(config::Overrides),
    /// Train one model on a dataset with an inner validation split
    Train(commands::TrainArgs),
    /// Segment one volume with an ensemble of checkpoints
    Predict(commands::PredictArgs),
    /// Score a label volume against a reference
    Evaluate(commands::EvaluateArgs),
    /// Write per-slice label overlays as P6 images
    Report(commands::ReportArgs),
    /// Train and evaluate every cross-validation fold
    Crossval(config::Overrides),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Generate phantoms and a manifest
    Gen(commands::PhantomGenArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(PhantomCommand::Gen(a)) => commands::phantom_gen(a),
        Command::Preprocess(o) => commands::preprocess(o),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Crossval(o) => crossval::crossval(o),
    }
}

/// Worker count from `VNCSEG_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("VNCSEG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => anyhow::bail!("VNCSEG_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(None),
    }
}
