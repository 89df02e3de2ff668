mod artifacts;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Common;

#[derive(Debug, Parser)]
#[command(name = "emin", version, about = "Evidence-weighted explanation generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its document collection
    Synth,
    /// Rank evidence paragraphs for a query, or attach evidence to a dataset
    Retrieve(commands::RetrieveArgs),
    /// Fit a model with EM and write a checkpoint and report
    Train(commands::TrainArgs),
    /// Generate explanations and evidence-weight traces
    Infer(commands::InferArgs),
    /// Score generations against reference explanations
    Eval(commands::EvalArgs),
    /// Compare attention cost of separated and concatenated evidence
    Bench,
    /// Compare analytic gradients with finite differences on a tiny model
    Gradcheck(commands::GradcheckArgs),
}

/// A problem with the command line or configuration rather than the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Gradient check above tolerance or a non-finite value during training.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericalError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericalError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<emin::Error>() {
            return match e {
                emin::Error::Config(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = cli.common.resolve().and_then(|config| match cli.command {
        Command::Synth => commands::synth(&cli.common, config),
        Command::Retrieve(a) => commands::retrieve(&cli.common, config, a),
        Command::Train(a) => commands::train(&cli.common, config, a),
        Command::Infer(a) => commands::infer(&cli.common, config, a),
        Command::Eval(a) => commands::eval(&cli.common, config, a),
        Command::Bench => commands::bench(&cli.common, config),
        Command::Gradcheck(a) => commands::gradcheck(&cli.common, config, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
