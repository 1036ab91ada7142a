//! `gdq` — de-quantization experiments from the command line.
//!
//! Four subcommands cover the whole workflow: `quantize` produces degraded
//! observations, `restore` runs latent-space descent against them,
//! `gradcheck` validates every analytic derivative with finite
//! differences, and `traceplot` aggregates threshold-estimate traces into
//! plot data.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or check failure,
//! 3 I/O failure.

mod config;
mod error;
mod generator_spec;
mod gradcheck_cmd;
mod quantize_cmd;
mod restore_cmd;
mod traceplot_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, PipelineArgs};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "gdq",
    version,
    about = "Restore continuous-tone images from quantized observations with a generative prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a hard quantizer (uniform, binary threshold, or palette) to images
    Quantize(PipelineArgs),
    /// Restore images by descending the restoration objective in latent space
    Restore(PipelineArgs),
    /// Check all analytic derivatives against finite differences
    Gradcheck(gradcheck_cmd::GradcheckArgs),
    /// Aggregate trace CSVs into threshold-error plot data
    Traceplot(traceplot_cmd::TraceplotArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Quantize(args) => quantize_cmd::run(&ExperimentConfig::resolve(&args)?),
        Command::Restore(args) => restore_cmd::run(&ExperimentConfig::resolve(&args)?),
        Command::Gradcheck(args) => gradcheck_cmd::run(&args),
        Command::Traceplot(args) => traceplot_cmd::run(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version arrive here too; they are not failures.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
