//! `gdq quantize`: apply the configured hard transform to a batch of
//! images. Per-file failures are reported and skipped so a long batch
//! never loses completed work; any failure turns into a nonzero exit at
//! the end.

use std::path::PathBuf;

use gdq_core::{
    load_image, otsu_threshold, read_palette, rgb_to_intensity, save_image, GrayscaleCoefficients,
    ImageTensor, PaletteQuantizer, ThresholdQuantizer, UniformQuantizer,
};

use crate::config::{ExperimentConfig, Pipeline, ThresholdMode};
use crate::error::CliError;

enum Transform {
    Uniform(UniformQuantizer),
    Threshold(Option<ThresholdQuantizer>),
    Palette(PaletteQuantizer),
}

impl Transform {
    fn prepare(pipeline: &Pipeline) -> Result<Self, CliError> {
        match pipeline {
            Pipeline::Uniform { m } => Ok(Transform::Uniform(UniformQuantizer::new(*m)?)),
            Pipeline::Colorize { threshold } => match threshold {
                ThresholdMode::Known(d) => {
                    Ok(Transform::Threshold(Some(ThresholdQuantizer::new(*d)?)))
                }
                ThresholdMode::PerImage => Ok(Transform::Threshold(None)),
            },
            Pipeline::Palette { file } => {
                let palette = read_palette(file)?;
                if palette.duplicate_count() > 0 {
                    eprintln!(
                        "warning: palette {} contains {} duplicate colors",
                        file.display(),
                        palette.duplicate_count()
                    );
                }
                Ok(Transform::Palette(palette))
            }
        }
    }

    /// Applies the transform; returns the quantized image and, for the
    /// per-image threshold mode, the threshold that was derived.
    fn apply(&self, img: &ImageTensor) -> Result<(ImageTensor, Option<f64>), CliError> {
        match self {
            Transform::Uniform(q) => Ok((q.quantize(img), None)),
            Transform::Threshold(fixed) => {
                let intensity = rgb_to_intensity(img, GrayscaleCoefficients::default())
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                let q = match fixed {
                    Some(q) => *q,
                    None => ThresholdQuantizer::new(otsu_threshold(&intensity)?)?,
                };
                let out = q.quantize(&intensity)?;
                Ok((out, fixed.is_none().then(|| q.delta())))
            }
            Transform::Palette(palette) => Ok((palette.quantize(img)?, None)),
        }
    }
}

pub fn run(config: &ExperimentConfig) -> Result<(), CliError> {
    config.require_inputs()?;
    let transform = Transform::prepare(&config.pipeline)?;
    config.ensure_out_dir()?;

    let mut deltas: Vec<(PathBuf, f64)> = Vec::new();
    let mut failures = 0usize;
    for input in &config.inputs {
        let outcome = load_image(input)
            .map_err(CliError::from)
            .and_then(|img| transform.apply(&img))
            .and_then(|(quantized, delta)| {
                let out = config.output_path(input, &format!("{}.q.png", config.pipeline.token()));
                save_image(&quantized, &out)?;
                Ok((out, delta))
            });
        match outcome {
            Ok((out, delta)) => {
                if let Some(d) = delta {
                    deltas.push((input.clone(), d));
                }
                println!("wrote {}", out.display());
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", input.display());
            }
        }
    }

    if matches!(
        config.pipeline,
        Pipeline::Colorize {
            threshold: ThresholdMode::PerImage
        }
    ) {
        let path = config.out_dir.join("deltas.csv");
        let mut text = String::from("image,delta\n");
        for (input, d) in &deltas {
            // Bare file names keep the sidecar stable across working
            // directories.
            let name = input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| input.display().to_string());
            text.push_str(&format!("{name},{d}\n"));
        }
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }

    if failures > 0 {
        return Err(CliError::Io(format!(
            "{failures} of {} images failed",
            config.inputs.len()
        )));
    }
    Ok(())
}
