//! `habmap`: habitat ensemble modelling and map assembly from the command line.

mod cmd_data;
mod cmd_map;
mod cmd_model;
mod error;
mod events;
mod prep;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "habmap", version, about = "Habitat ensemble modelling and map assembly")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, env = "HABMAP_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads for tree fitting, tuning trials and tiles (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Validate inputs without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign plots to spatial blocks.
    Partition(cmd_data::PartitionArgs),
    /// Search hyperparameters on a hold-out of each training portion.
    Tune(cmd_model::TuneArgs),
    /// Fit ensemble members and rebuild the formation's ensemble.
    Train(cmd_model::TrainArgs),
    /// Predict a probability cube over rasters, or per plot.
    Predict(cmd_map::PredictArgs),
    /// Per-class precision, recall and F1 of predictions against reference labels.
    Evaluate(cmd_data::EvaluateArgs),
    /// Mask, rank and merge probability cubes into map products.
    Assemble(cmd_map::AssembleArgs),
    /// Out-of-fold metrics and member weights of a trained ensemble.
    Report(cmd_model::ReportArgs),
    /// Write a synthetic world of plots and rasters.
    Synth(cmd_data::SynthArgs),
}

pub struct Globals {
    pub seed: u64,
    pub dry_run: bool,
}

fn run(cli: &Cli) -> CliResult<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let g = Globals {
        seed: cli.seed,
        dry_run: cli.dry_run,
    };
    match &cli.command {
        Command::Partition(a) => cmd_data::partition(&g, a),
        Command::Tune(a) => cmd_model::tune_cmd(&g, a),
        Command::Train(a) => cmd_model::train_cmd(&g, a),
        Command::Predict(a) => cmd_map::predict_cmd(&g, a),
        Command::Evaluate(a) => cmd_data::evaluate_cmd(&g, a),
        Command::Assemble(a) => cmd_map::assemble_cmd(&g, a),
        Command::Report(a) => cmd_model::report_cmd(&g, a),
        Command::Synth(a) => cmd_data::synth(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    events::init(cli.log_level);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
