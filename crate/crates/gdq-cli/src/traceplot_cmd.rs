//! `gdq traceplot`: collapse an ensemble of restoration traces into plot
//! data for the threshold estimate — one `iter,delta_err_var` row per
//! trace point, where the value is the mean squared error of the estimated
//! threshold against its ground truth across the ensemble.

use std::path::PathBuf;

use clap::Args;
use gdq_core::{delta_error_variance, read_trace_csv, write_delta_variance_csv, RunTrace};

use crate::error::CliError;

#[derive(Debug, Args)]
pub struct TraceplotArgs {
    /// Ground-truth threshold(s): give once to apply to every trace, or
    /// once per trace in order
    #[arg(long = "delta-true", value_name = "DELTA", required = true)]
    pub delta_true: Vec<f64>,

    /// Output CSV; written to stdout when omitted
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Trace CSV files from restoration runs
    #[arg(value_name = "TRACE", required = true)]
    pub traces: Vec<PathBuf>,
}

pub fn run(args: &TraceplotArgs) -> Result<(), CliError> {
    let truths: Vec<f64> = match args.delta_true.len() {
        1 => vec![args.delta_true[0]; args.traces.len()],
        n if n == args.traces.len() => args.delta_true.clone(),
        n => {
            return Err(CliError::Usage(format!(
                "{n} ground-truth thresholds for {} traces (give 1, or 1 per trace)",
                args.traces.len()
            )))
        }
    };
    for &d in &truths {
        if !(d.is_finite() && 0.0 < d && d < 1.0) {
            return Err(CliError::Validation(format!(
                "ground-truth threshold {d} must lie strictly inside (0, 1)"
            )));
        }
    }

    let traces: Vec<RunTrace> = args
        .traces
        .iter()
        .map(|path| read_trace_csv(path).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let rows = delta_error_variance(&traces, &truths)?;

    match &args.out {
        Some(path) => {
            write_delta_variance_csv(&rows, path)?;
            println!("wrote {}", path.display());
        }
        None => {
            println!("iter,delta_err_var");
            for (iter, var) in &rows {
                println!("{iter},{var}");
            }
        }
    }
    Ok(())
}
