//! `gdq restore`: latent-space descent against quantized observations.
//!
//! The batch is validated in full (generator resolved, every observation
//! shape-checked) before the first iteration runs, then images are restored
//! concurrently on a bounded worker pool. Each image yields a restored PNG
//! and a trace CSV; the batch yields one `metrics.csv` with a mean row.
//! Per-image failures after validation are recorded in the metrics and do
//! not stop the batch.

use std::fs;
use std::path::{Path, PathBuf};

use gdq_core::{
    load_image, mse, psnr, read_palette, restore, restore_with_unknown_threshold, save_image,
    write_trace_csv, GeneratorModel, GrayscaleCoefficients, ImageTensor, ObjectiveSpec,
    ObjectiveVariant, OptimizerConfig, PaletteQuantizer, Restoration, RestoreError, SurrogateKind,
    SurrogateParams, UniformQuantizer,
};
use rayon::prelude::*;

use crate::config::{variant_token, ExperimentConfig, Pipeline, ThresholdMode};
use crate::error::CliError;
use crate::generator_spec::resolve_generator;

/// Everything needed to build one per-image objective.
struct Setup {
    variant: ObjectiveVariant,
    kind: SurrogateKind,
    params: SurrogateParams,
    projection: Option<GrayscaleCoefficients>,
    /// Route through the entry point that insists the threshold is trainable.
    unknown_threshold: bool,
}

impl Setup {
    fn prepare(config: &ExperimentConfig) -> Result<Self, CliError> {
        let (kind, params, projection, unknown_threshold) = match &config.pipeline {
            Pipeline::Uniform { m } => (
                SurrogateKind::SoftUniform(UniformQuantizer::new(*m)?),
                SurrogateParams::default_init(),
                None,
                false,
            ),
            Pipeline::Colorize { threshold } => {
                let params = match threshold {
                    ThresholdMode::Known(d) => {
                        let mut p = SurrogateParams::with_k_delta(10.0, *d)
                            .map_err(|e| CliError::Validation(e.to_string()))?;
                        p.set_train_delta(false);
                        p
                    }
                    ThresholdMode::PerImage => SurrogateParams::default_init_with_delta(),
                };
                (
                    SurrogateKind::SoftThreshold,
                    params,
                    Some(GrayscaleCoefficients::default()),
                    matches!(threshold, ThresholdMode::PerImage),
                )
            }
            Pipeline::Palette { file } => {
                let palette: PaletteQuantizer = read_palette(file)?;
                if palette.duplicate_count() > 0 {
                    eprintln!(
                        "warning: palette {} contains {} duplicate colors",
                        file.display(),
                        palette.duplicate_count()
                    );
                }
                (
                    SurrogateKind::SoftPalette(palette),
                    SurrogateParams::default_init(),
                    None,
                    false,
                )
            }
        };
        Ok(Self {
            variant: config.variant,
            kind,
            params,
            projection,
            unknown_threshold,
        })
    }

    fn spec<'a>(
        &self,
        generator: &'a GeneratorModel,
        observation: &'a ImageTensor,
    ) -> Result<ObjectiveSpec<'a>, RestoreError> {
        match self.variant {
            ObjectiveVariant::Identity => {
                ObjectiveSpec::identity_fit(generator, observation, self.projection)
            }
            ObjectiveVariant::Full => ObjectiveSpec::new(
                ObjectiveVariant::Full,
                self.kind.clone(),
                self.params,
                generator,
                observation,
                self.projection,
            ),
        }
    }
}

/// One line of `metrics.csv`, plus console notes gathered off-thread.
struct Row {
    input: PathBuf,
    error: f64,
    psnr: f64,
    status: String,
    notes: Vec<String>,
}

impl Row {
    fn failed(input: &Path, message: String) -> Self {
        Self {
            input: input.to_path_buf(),
            error: f64::NAN,
            psnr: f64::NAN,
            status: message,
            notes: Vec::new(),
        }
    }

    fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn run(config: &ExperimentConfig) -> Result<(), CliError> {
    config.require_inputs()?;
    let generator_text = config
        .generator
        .as_deref()
        .ok_or_else(|| CliError::Usage("restore needs a generator (--generator)".into()))?;
    let generator = resolve_generator(generator_text)?;
    let setup = Setup::prepare(config)?;
    config.ensure_out_dir()?;

    // Load everything first. Unreadable files become failed rows; the batch
    // carries on without them.
    let loaded: Vec<(&PathBuf, Result<ImageTensor, String>)> = config
        .inputs
        .iter()
        .map(|input| (input, load_image(input).map_err(|e| e.to_string())))
        .collect();

    // Shape-check every readable observation against the generator before
    // any descent starts: a mismatched batch should fail fast, not after
    // half the work is done.
    for (input, result) in &loaded {
        if let Ok(observation) = result {
            setup
                .spec(&generator, observation)
                .map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))?;
    let rows: Vec<Row> = pool.install(|| {
        loaded
            .par_iter()
            .enumerate()
            .map(|(index, (input, result))| match result {
                Ok(observation) => run_one(config, &setup, &generator, input, observation, index),
                Err(message) => Row::failed(input, message.clone()),
            })
            .collect()
    });

    for row in &rows {
        for note in &row.notes {
            eprintln!("{note}");
        }
        if row.ok() {
            println!(
                "{}: error {:.6} psnr {:.2}",
                row.input.display(),
                row.error,
                row.psnr
            );
        } else {
            eprintln!("error: {}: {}", row.input.display(), row.status);
        }
    }

    let metrics = config.out_dir.join("metrics.csv");
    write_metrics(&rows, config.variant, &metrics)?;
    println!("wrote {}", metrics.display());

    let failures = rows.iter().filter(|r| !r.ok()).count();
    if failures > 0 {
        return Err(CliError::Io(format!(
            "{failures} of {} images failed",
            rows.len()
        )));
    }
    Ok(())
}

fn run_one(
    config: &ExperimentConfig,
    setup: &Setup,
    generator: &GeneratorModel,
    input: &Path,
    observation: &ImageTensor,
    index: usize,
) -> Row {
    let spec = match setup.spec(generator, observation) {
        Ok(spec) => spec,
        Err(e) => return Row::failed(input, e.to_string()),
    };
    // Seeds are spaced by the restart count so no two runs in the batch
    // share a latent initialization.
    let optimizer = OptimizerConfig {
        seed: config
            .optimizer
            .seed
            .wrapping_add((index * config.optimizer.restarts) as u64),
        ..config.optimizer
    };
    let token = format!(
        "{}.{}",
        config.pipeline.token(),
        variant_token(config.variant)
    );

    let restoration = if setup.unknown_threshold {
        restore_with_unknown_threshold(&spec, &optimizer)
    } else {
        restore(&spec, &optimizer)
    };
    match restoration {
        Ok(result) => {
            let mut row = write_outputs(config, input, observation, &token, &result);
            if result.trace.delta_unconstrained {
                row.notes.push(format!(
                    "warning: {}: constant observation leaves the threshold estimate unconstrained",
                    input.display()
                ));
            }
            row
        }
        Err(RestoreError::NonFiniteLoss { iteration, trace }) => {
            // Keep the partial trace around: it is the main diagnostic for
            // a diverged run.
            let trace_path = config.output_path(input, &format!("{token}.trace.csv"));
            let mut row = Row::failed(
                input,
                format!("loss became non-finite at iteration {iteration}"),
            );
            match write_trace_csv(&trace, &trace_path) {
                Ok(()) => row
                    .notes
                    .push(format!("partial trace written to {}", trace_path.display())),
                Err(e) => row
                    .notes
                    .push(format!("could not write partial trace: {e}")),
            }
            row
        }
        Err(other) => Row::failed(input, other.to_string()),
    }
}

/// Writes the restored image and trace, computes metrics, and assembles the
/// CSV row.
fn write_outputs(
    config: &ExperimentConfig,
    input: &Path,
    observation: &ImageTensor,
    token: &str,
    result: &Restoration,
) -> Row {
    let png = config.output_path(input, &format!("{token}.png"));
    if let Err(e) = save_image(&result.image, &png) {
        return Row::failed(input, e.to_string());
    }
    let trace_path = config.output_path(input, &format!("{token}.trace.csv"));
    if let Err(e) = write_trace_csv(&result.trace, &trace_path) {
        return Row::failed(input, e.to_string());
    }

    let mut row = Row {
        input: input.to_path_buf(),
        error: f64::NAN,
        psnr: f64::NAN,
        status: "ok".into(),
        notes: Vec::new(),
    };
    match metrics_reference(config, input, observation, &result.image) {
        Some(Ok(reference)) => {
            row.error = mse(&result.image, &reference).expect("shape checked");
            row.psnr = psnr(&result.image, &reference).expect("shape checked");
        }
        Some(Err(note)) => row.notes.push(note),
        None => row.notes.push(format!(
            "note: {}: no metrics reference with matching shape; error and psnr left blank",
            input.display()
        )),
    }
    row
}

/// Picks what to measure the restoration against: a clean image from the
/// truth directory when one matches, otherwise the observation itself when
/// shapes agree (uniform and palette pipelines).
fn metrics_reference(
    config: &ExperimentConfig,
    input: &Path,
    observation: &ImageTensor,
    restored: &ImageTensor,
) -> Option<Result<ImageTensor, String>> {
    if let Some(dir) = &config.truth_dir {
        if let Some(path) = find_truth(dir, input) {
            return Some(match load_image(&path) {
                Ok(truth) if truth.shape() == restored.shape() => Ok(truth),
                Ok(_) => Err(format!(
                    "note: {}: truth image {} has a different shape; metrics skipped",
                    input.display(),
                    path.display()
                )),
                Err(e) => Err(format!(
                    "note: {}: cannot read truth image: {e}",
                    input.display()
                )),
            });
        }
    }
    (observation.shape() == restored.shape()).then(|| Ok(observation.clone()))
}

/// Truth files are matched on the observation's name up to the first dot,
/// so `face.uniform.q.png` finds `truth/face.png`.
fn find_truth(dir: &Path, input: &Path) -> Option<PathBuf> {
    let name = input.file_name()?.to_str()?;
    let prefix = name.split('.').next()?;
    ["png", "ppm", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{prefix}.{ext}")))
        .find(|candidate| candidate.exists())
}

/// CSV rows carry the bare file name so the output is stable across
/// working directories; the batch already forbids stem collisions by
/// writing everything into one output directory.
fn csv_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_metrics(rows: &[Row], variant: ObjectiveVariant, path: &Path) -> Result<(), CliError> {
    let token = variant_token(variant);
    let mut text = String::from("image,variant,error,psnr,status\n");
    for row in rows {
        text.push_str(&format!(
            "{},{token},{},{},{}\n",
            csv_name(&row.input),
            row.error,
            row.psnr,
            row.status
        ));
    }
    let ok: Vec<&Row> = rows.iter().filter(|r| r.ok()).collect();
    if !ok.is_empty() {
        let n = ok.len() as f64;
        let mean_error = ok.iter().map(|r| r.error).sum::<f64>() / n;
        let mean_psnr = ok.iter().map(|r| r.psnr).sum::<f64>() / n;
        text.push_str(&format!("mean,{token},{mean_error},{mean_psnr},\n"));
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
