//! Experiment configuration: a JSON manifest merged with command-line
//! flags (flags win), resolved into a validated [`ExperimentConfig`].
//!
//! The manifest mirrors the flag names so a run can be reproduced either
//! way; unknown keys are rejected to catch typos early.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use gdq_core::{ObjectiveVariant, OptimizerConfig};
use serde::Deserialize;

use crate::error::CliError;

/// Flags shared by `quantize` and `restore`.
#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON experiment manifest; explicit flags override its fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Quantization pipeline: uniform | colorize | palette
    #[arg(long)]
    pub pipeline: Option<String>,

    /// Levels per channel for the uniform pipeline
    #[arg(long)]
    pub m: Option<usize>,

    /// Known binarization threshold for the colorize pipeline
    #[arg(long)]
    pub delta: Option<f64>,

    /// Colorize without a known threshold: `quantize` derives it per image
    /// by Otsu's method, `restore` estimates it jointly with the latent
    #[arg(long)]
    pub otsu: bool,

    /// Palette file for the palette pipeline
    #[arg(long, value_name = "FILE")]
    pub palette: Option<PathBuf>,

    /// Objective variant for restoration: full | identity
    #[arg(long)]
    pub variant: Option<String>,

    /// Generator: a model file path or a toy spec
    /// (toy:identity:HxWxC, toy:linear:SEED:DIM:HxWxC,
    /// toy:mlp:SEED:DIM:W1-W2-...:HxWxC)
    #[arg(long, value_name = "MODEL")]
    pub generator: Option<String>,

    /// Descent iterations per restart
    #[arg(long)]
    pub iters: Option<usize>,

    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,

    /// Momentum coefficient in [0, 1)
    #[arg(long)]
    pub momentum: Option<f64>,

    /// Base random seed; each image in a batch gets its own offset
    #[arg(long)]
    pub seed: Option<u64>,

    /// Independent restarts per image; the best final loss wins
    #[arg(long)]
    pub restarts: Option<usize>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for batch runs (default: available parallelism)
    #[arg(long)]
    pub workers: Option<usize>,

    /// Input images (PNG, PPM, or PGM)
    #[arg(value_name = "IMAGE")]
    pub inputs: Vec<PathBuf>,
}

/// The manifest file; every field optional so flags can fill the gaps.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    pipeline: Option<String>,
    m: Option<usize>,
    delta: Option<f64>,
    otsu: Option<bool>,
    palette: Option<PathBuf>,
    variant: Option<String>,
    generator: Option<String>,
    iters: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    seed: Option<u64>,
    restarts: Option<usize>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    inputs: Option<Vec<PathBuf>>,
    /// Directory of clean reference images for restore metrics, matched to
    /// observations by the part of the file name before the first dot.
    truth: Option<PathBuf>,
}

/// Which hard transform the experiment studies.
#[derive(Debug, Clone)]
pub enum Pipeline {
    /// Per-channel uniform quantization to `m` levels.
    Uniform { m: usize },
    /// Grayscale projection followed by binarization.
    Colorize { threshold: ThresholdMode },
    /// Nearest-color projection onto a fixed palette.
    Palette { file: PathBuf },
}

#[derive(Debug, Clone, Copy)]
pub enum ThresholdMode {
    /// The threshold is part of the experiment definition.
    Known(f64),
    /// No agreed threshold: derived per image (Otsu) when quantizing,
    /// estimated jointly with the latent when restoring.
    PerImage,
}

impl Pipeline {
    /// Token used in output file names.
    pub fn token(&self) -> &'static str {
        match self {
            Pipeline::Uniform { .. } => "uniform",
            Pipeline::Colorize { .. } => "colorize",
            Pipeline::Palette { .. } => "palette",
        }
    }
}

/// A fully resolved experiment: manifest and flags merged, enums parsed,
/// numeric ranges checked.
#[derive(Debug)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub variant: ObjectiveVariant,
    pub generator: Option<String>,
    pub optimizer: OptimizerConfig,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub truth_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn resolve(args: &PipelineArgs) -> Result<Self, CliError> {
        let manifest = match &args.config {
            Some(path) => load_manifest(path)?,
            None => Manifest::default(),
        };

        let pipeline_name = args
            .pipeline
            .clone()
            .or(manifest.pipeline)
            .ok_or_else(|| CliError::Usage("no pipeline selected (--pipeline)".into()))?;
        let m = args.m.or(manifest.m);
        let delta = args.delta.or(manifest.delta);
        let otsu = args.otsu || manifest.otsu.unwrap_or(false);
        let palette = args.palette.clone().or(manifest.palette);

        let pipeline = match pipeline_name.as_str() {
            "uniform" => {
                let m = m.ok_or_else(|| {
                    CliError::Usage("the uniform pipeline needs a level count (--m)".into())
                })?;
                if m == 0 {
                    return Err(CliError::Validation(
                        "level count must be at least 1".into(),
                    ));
                }
                Pipeline::Uniform { m }
            }
            "colorize" => {
                let threshold = match (delta, otsu) {
                    (Some(d), false) => {
                        if !(d.is_finite() && 0.0 < d && d < 1.0) {
                            return Err(CliError::Validation(format!(
                                "threshold {d} must lie strictly inside (0, 1)"
                            )));
                        }
                        ThresholdMode::Known(d)
                    }
                    (None, true) => ThresholdMode::PerImage,
                    (Some(_), true) => {
                        return Err(CliError::Usage(
                            "--delta and --otsu are mutually exclusive".into(),
                        ))
                    }
                    (None, false) => {
                        return Err(CliError::Usage(
                            "the colorize pipeline needs --delta or --otsu".into(),
                        ))
                    }
                };
                Pipeline::Colorize { threshold }
            }
            "palette" => {
                let file = palette.ok_or_else(|| {
                    CliError::Usage("the palette pipeline needs a palette file (--palette)".into())
                })?;
                Pipeline::Palette { file }
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown pipeline {other:?} (expected uniform, colorize, or palette)"
                )))
            }
        };

        let variant = match args
            .variant
            .clone()
            .or(manifest.variant)
            .as_deref()
            .unwrap_or("full")
        {
            "full" => ObjectiveVariant::Full,
            "identity" => ObjectiveVariant::Identity,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown variant {other:?} (expected full or identity)"
                )))
            }
        };

        let defaults = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            learning_rate: args.lr.or(manifest.lr).unwrap_or(defaults.learning_rate),
            momentum: args
                .momentum
                .or(manifest.momentum)
                .unwrap_or(defaults.momentum),
            iterations: args.iters.or(manifest.iters).unwrap_or(defaults.iterations),
            seed: args.seed.or(manifest.seed).unwrap_or(defaults.seed),
            restarts: args
                .restarts
                .or(manifest.restarts)
                .unwrap_or(defaults.restarts),
            ..defaults
        };
        optimizer
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;

        let inputs = if args.inputs.is_empty() {
            manifest.inputs.unwrap_or_default()
        } else {
            args.inputs.clone()
        };

        Ok(Self {
            pipeline,
            variant,
            generator: args.generator.clone().or(manifest.generator),
            optimizer,
            inputs,
            out_dir: args
                .out
                .clone()
                .or(manifest.out)
                .unwrap_or_else(|| PathBuf::from(".")),
            workers: args.workers.or(manifest.workers),
            truth_dir: manifest.truth,
        })
    }

    /// Batches need at least one input image.
    pub fn require_inputs(&self) -> Result<(), CliError> {
        if self.inputs.is_empty() {
            return Err(CliError::Usage("no input images given".into()));
        }
        Ok(())
    }

    /// Creates the output directory if necessary.
    pub fn ensure_out_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    /// `<out>/<stem>.<rest>`, where `<stem>` is the input file name with
    /// its final extension removed.
    pub fn output_path(&self, input: &Path, rest: &str) -> PathBuf {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        self.out_dir.join(format!("{stem}.{rest}"))
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// The seed field of a manifest, for commands that use nothing else.
pub fn manifest_seed(path: &Path) -> Result<Option<u64>, CliError> {
    Ok(load_manifest(path)?.seed)
}

/// Variant token used in output file names.
pub fn variant_token(variant: ObjectiveVariant) -> &'static str {
    match variant {
        ObjectiveVariant::Full => "full",
        ObjectiveVariant::Identity => "identity",
    }
}
