//! Hard quantization transforms used to synthesize degraded observations:
//! per-channel uniform quantization, nearest-palette color mapping, and
//! binary intensity thresholding, plus Otsu threshold selection and
//! k-means palette extraction.
//!
//! All transforms are deterministic pure functions; the only randomness is
//! the seeded centroid initialization in [`kmeans_palette`].

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::ImageTensor;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("quantizer needs at least one level")]
    ZeroLevels,
    #[error("palette must contain at least one color")]
    EmptyPalette,
    #[error("palette color {index} has component {value} outside [0, 1]")]
    BadPaletteColor { index: usize, value: f64 },
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    BadThreshold(f64),
    #[error("expected a {expected}-channel image, got {actual} channels")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("image histogram occupies fewer than two bins; threshold selection is undefined")]
    DegenerateHistogram,
    #[error("requested {requested} clusters but the image has only {distinct} distinct colors")]
    TooFewColors { requested: usize, distinct: usize },
    #[error("a palette of {levels}^3 colors is too large to materialize")]
    GridTooLarge { levels: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed palette line: {detail}")]
    MalformedPalette {
        path: String,
        line: usize,
        detail: String,
    },
}

fn output_image(height: usize, width: usize, channels: usize, data: Vec<f64>) -> ImageTensor {
    ImageTensor::new(height, width, channels, data).expect("quantizer output stays in [0, 1]")
}

/// Uniform scalar quantizer with `m` levels per channel.
///
/// Bin `i` covers `((i-1)/m, i/m]` for `i = 1..m`, with `r = 0` assigned to
/// the first bin; values map to the bin center `(i - 0.5)/m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformQuantizer {
    levels: usize,
}

impl UniformQuantizer {
    pub fn new(levels: usize) -> Result<Self, QuantizeError> {
        if levels == 0 {
            return Err(QuantizeError::ZeroLevels);
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// The representable values `(i - 0.5)/m` for `i = 1..m`, in order.
    pub fn centers(&self) -> Vec<f64> {
        let m = self.levels as f64;
        (1..=self.levels).map(|i| (i as f64 - 0.5) / m).collect()
    }

    /// Maps one channel value to the center of its bin.
    pub fn quantize_scalar(&self, r: f64) -> f64 {
        let m = self.levels as f64;
        let bin = (r * m).ceil().clamp(1.0, m);
        (bin - 0.5) / m
    }

    /// Quantizes every channel of every pixel independently.
    pub fn quantize(&self, img: &ImageTensor) -> ImageTensor {
        let data = img
            .data()
            .iter()
            .map(|&r| self.quantize_scalar(r))
            .collect();
        output_image(img.height(), img.width(), img.channels(), data)
    }
}

/// An ordered list of RGB colors; quantization maps each pixel to the
/// nearest entry in squared Euclidean distance, ties to the lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteQuantizer {
    colors: Vec<[f64; 3]>,
}

impl PaletteQuantizer {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self, QuantizeError> {
        if colors.is_empty() {
            return Err(QuantizeError::EmptyPalette);
        }
        for (index, color) in colors.iter().enumerate() {
            for &value in color {
                if !(0.0..=1.0).contains(&value) {
                    return Err(QuantizeError::BadPaletteColor { index, value });
                }
            }
        }
        Ok(Self { colors })
    }

    /// The `m^3` grid of all per-channel uniform level centers, ordered with
    /// the red index slowest and the blue index fastest.
    pub fn grid(levels: usize) -> Result<Self, QuantizeError> {
        let uniform = UniformQuantizer::new(levels)?;
        levels
            .checked_pow(3)
            .ok_or(QuantizeError::GridTooLarge { levels })?;
        let centers = uniform.centers();
        let mut colors = Vec::with_capacity(levels * levels * levels);
        for &r in &centers {
            for &g in &centers {
                for &b in &centers {
                    colors.push([r, g, b]);
                }
            }
        }
        Self::new(colors)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty palettes
    }

    /// Number of entries that exactly repeat an earlier entry. Duplicates
    /// are legal but usually indicate a degenerate palette, so callers may
    /// want to surface this as a warning.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = BTreeSet::new();
        self.colors
            .iter()
            .filter(|c| !seen.insert(color_key(c)))
            .count()
    }

    /// Index of the closest palette entry (squared Euclidean distance,
    /// ties broken by the lowest index).
    pub fn nearest(&self, pixel: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, color) in self.colors.iter().enumerate() {
            let dist = squared_distance(&pixel, color);
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    /// Replaces every pixel by its nearest palette entry.
    pub fn quantize(&self, img: &ImageTensor) -> Result<ImageTensor, QuantizeError> {
        if img.channels() != 3 {
            return Err(QuantizeError::ChannelMismatch {
                expected: 3,
                actual: img.channels(),
            });
        }
        let mut data = Vec::with_capacity(img.len());
        for pixel in img.pixels() {
            let color = self.colors[self.nearest([pixel[0], pixel[1], pixel[2]])];
            data.extend_from_slice(&color);
        }
        Ok(output_image(img.height(), img.width(), 3, data))
    }
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn color_key(c: &[f64; 3]) -> [u64; 3] {
    [c[0].to_bits(), c[1].to_bits(), c[2].to_bits()]
}

/// Binary quantizer `1{intensity >= delta}` for single-channel images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdQuantizer {
    delta: f64,
}

impl ThresholdQuantizer {
    pub fn new(delta: f64) -> Result<Self, QuantizeError> {
        if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
            return Err(QuantizeError::BadThreshold(delta));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn quantize(&self, img: &ImageTensor) -> Result<ImageTensor, QuantizeError> {
        if img.channels() != 1 {
            return Err(QuantizeError::ChannelMismatch {
                expected: 1,
                actual: img.channels(),
            });
        }
        let data = img
            .data()
            .iter()
            .map(|&v| if v >= self.delta { 1.0 } else { 0.0 })
            .collect();
        Ok(output_image(img.height(), img.width(), 1, data))
    }
}

const OTSU_BINS: usize = 256;

fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Selects a binarization threshold by Otsu's method.
///
/// Builds a 256-bin histogram over `[0, 1]` and scans every bin-edge
/// candidate `(t + 1)/256` for `t = 0..256`, maximizing the between-class
/// variance `w0·w1·(mu0 - mu1)^2` of the two sides; ties go to the lowest
/// threshold. An image whose histogram occupies fewer than two bins has no
/// meaningful split and is rejected.
pub fn otsu_threshold(intensity: &ImageTensor) -> Result<f64, QuantizeError> {
    if intensity.channels() != 1 {
        return Err(QuantizeError::ChannelMismatch {
            expected: 1,
            actual: intensity.channels(),
        });
    }
    let mut counts = [0u64; OTSU_BINS];
    for &v in intensity.data() {
        counts[otsu_bin(v)] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(QuantizeError::DegenerateHistogram);
    }

    let total = intensity.len() as f64;
    let center = |bin: usize| (bin as f64 + 0.5) / OTSU_BINS as f64;
    let full_sum: f64 = counts
        .iter()
        .enumerate()
        .map(|(bin, &c)| c as f64 * center(bin))
        .sum();

    let mut best_t = 0;
    let mut best_var = f64::NEG_INFINITY;
    let mut low_count = 0.0;
    let mut low_sum = 0.0;
    for (t, &count) in counts.iter().enumerate() {
        low_count += count as f64;
        low_sum += count as f64 * center(t);
        let high_count = total - low_count;
        if low_count == 0.0 || high_count == 0.0 {
            continue;
        }
        let w0 = low_count / total;
        let w1 = high_count / total;
        let mu0 = low_sum / low_count;
        let mu1 = (full_sum - low_sum) / high_count;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    Ok((best_t as f64 + 1.0) / OTSU_BINS as f64)
}

const KMEANS_MAX_ITERATIONS: usize = 100;

/// Extracts an `m`-color palette from an RGB image with Lloyd's algorithm.
///
/// Centroids are initialized by drawing `m` of the image's distinct colors
/// with a seeded generator, then refined until the assignment reaches a
/// fixpoint or the iteration cap; a cluster that loses all its pixels keeps
/// its previous centroid. Deterministic given `(img, m, seed)`.
pub fn kmeans_palette(
    img: &ImageTensor,
    m: usize,
    seed: u64,
) -> Result<PaletteQuantizer, QuantizeError> {
    if img.channels() != 3 {
        return Err(QuantizeError::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    if m == 0 {
        return Err(QuantizeError::EmptyPalette);
    }
    let pixels: Vec<[f64; 3]> = img.pixels().map(|p| [p[0], p[1], p[2]]).collect();
    let distinct: Vec<[f64; 3]> = pixels
        .iter()
        .map(color_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|key| key.map(f64::from_bits))
        .collect();
    if distinct.len() < m {
        return Err(QuantizeError::TooFewColors {
            requested: m,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<[f64; 3]> = rand::seq::index::sample(&mut rng, distinct.len(), m)
        .into_iter()
        .map(|i| distinct[i])
        .collect();

    let mut assignment = vec![usize::MAX; pixels.len()];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let palette = PaletteQuantizer::new(centroids.clone())?;
        let mut changed = false;
        for (slot, pixel) in assignment.iter_mut().zip(&pixels) {
            let nearest = palette.nearest(*pixel);
            if *slot != nearest {
                *slot = nearest;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 3]; m];
        let mut counts = vec![0u64; m];
        for (&cluster, pixel) in assignment.iter().zip(&pixels) {
            counts[cluster] += 1;
            for (s, v) in sums[cluster].iter_mut().zip(pixel) {
                *s += v;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if count > 0 {
                *centroid = sum.map(|s| s / count as f64);
            }
        }
    }
    PaletteQuantizer::new(centroids)
}

/// Writes a palette as plain text, one `r g b` triple per line, in palette
/// index order.
pub fn write_palette(
    palette: &PaletteQuantizer,
    path: impl AsRef<Path>,
) -> Result<(), QuantizeError> {
    let path = path.as_ref();
    let mut out = String::new();
    for [r, g, b] in palette.colors() {
        out.push_str(&format!("{r} {g} {b}\n"));
    }
    fs::write(path, out).map_err(|source| QuantizeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a palette written by [`write_palette`]. Blank lines are ignored.
pub fn read_palette(path: impl AsRef<Path>) -> Result<PaletteQuantizer, QuantizeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| QuantizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut colors = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |detail: String| QuantizeError::MalformedPalette {
            path: path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 components, got {}",
                fields.len()
            )));
        }
        let mut color = [0.0; 3];
        for (slot, field) in color.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|e| malformed(format!("bad component {field:?}: {e}")))?;
        }
        colors.push(color);
    }
    PaletteQuantizer::new(colors)
}
