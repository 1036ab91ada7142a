//! `gdq gradcheck`: run the finite-difference suite over every analytic
//! derivative and report the worst relative error per check. Exits
//! nonzero when any check crosses the tolerance, so CI can gate on it.

use std::path::PathBuf;

use clap::Args;
use gdq_core::gradcheck::run_gradient_checks;

use crate::config::manifest_seed;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON experiment manifest; only its seed is used here
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for the evaluation points
    #[arg(long)]
    pub seed: Option<u64>,

    /// Accepted evaluation points per check
    #[arg(long, default_value_t = 100)]
    pub points: usize,

    /// Test hook: offset added to one analytic derivative so the failure
    /// path can be exercised
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub corrupt: f64,
}

pub fn run(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.points == 0 {
        return Err(CliError::Usage(
            "needs at least one evaluation point".into(),
        ));
    }
    let manifest_default = match &args.config {
        Some(path) => manifest_seed(path)?,
        None => None,
    };
    let seed = args.seed.or(manifest_default).unwrap_or(0);
    let report = run_gradient_checks(seed, args.points, args.corrupt);
    print!("{}", report.summary());
    if report.passed() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::Validation("gradient checks failed".into()))
    }
}
