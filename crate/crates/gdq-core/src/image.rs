//! Unit-interval image tensors, the RGB-to-intensity projection, and the
//! MSE/PSNR quality metrics used to score reconstructions.

use thiserror::Error;

/// Errors raised by image construction, projection, and metric operations.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("channels must be 1 or 3, got {0}")]
    BadChannelCount(usize),
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("data length {actual} does not match {height}x{width}x{channels} = {expected}")]
    LengthMismatch {
        height: usize,
        width: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("element {index} is {value}, outside the unit interval")]
    OutOfRange { index: usize, value: f64 },
    #[error("element {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {0}x{1}x{2} vs {3}x{4}x{5}")]
    DimensionMismatch(usize, usize, usize, usize, usize, usize),
    #[error("expected a {expected}-channel image, got {actual} channels")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("grayscale coefficients must be finite and nonnegative")]
    BadCoefficients,
}

/// An H x W x C image with every element in `[0, 1]`.
///
/// Data is stored row-major with interleaved channels, so element
/// `(row, col, ch)` lives at index `(row * width + col) * channels + ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, rejecting any element outside `[0, 1]`.
    ///
    /// Out-of-range data is an error rather than a silent clamp so that bugs
    /// in upstream numeric code surface immediately; use
    /// [`ImageTensor::from_clamped`] when saturation is intended.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        Self::check_shape(height, width, channels, data.len())?;
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(ImageError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(ImageError::OutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image after clamping every element into `[0, 1]`.
    ///
    /// This is the explicit saturation operation; non-finite data is still
    /// rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        Self::check_shape(height, width, channels, data.len())?;
        for (index, value) in data.iter_mut().enumerate() {
            if !value.is_finite() {
                return Err(ImageError::NonFinite { index });
            }
            *value = value.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// An image with every element equal to `value`.
    pub fn constant(
        height: usize,
        width: usize,
        channels: usize,
        value: f64,
    ) -> Result<Self, ImageError> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    fn check_shape(
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    ) -> Result<(), ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannelCount(channels));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let expected = height * width * channels;
        if len != expected {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                channels,
                expected,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Total element count N = height * width * channels.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Pixel count n = height * width.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Iterates over pixels as `channels`-length slices.
    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// True when every element equals the first one.
    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|&v| v == self.data[0])
    }

    fn require_same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch(
                self.height,
                self.width,
                self.channels,
                other.height,
                other.width,
                other.channels,
            ))
        }
    }
}

/// Weights combining R, G, B into a single intensity value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrayscaleCoefficients {
    a_r: f64,
    a_g: f64,
    a_b: f64,
}

impl GrayscaleCoefficients {
    pub fn new(a_r: f64, a_g: f64, a_b: f64) -> Result<Self, ImageError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(a_r) && ok(a_g) && ok(a_b) {
            Ok(Self { a_r, a_g, a_b })
        } else {
            Err(ImageError::BadCoefficients)
        }
    }

    pub fn a_r(&self) -> f64 {
        self.a_r
    }

    pub fn a_g(&self) -> f64 {
        self.a_g
    }

    pub fn a_b(&self) -> f64 {
        self.a_b
    }
}

impl Default for GrayscaleCoefficients {
    /// The standard luma weights (0.2126, 0.7152, 0.0722).
    fn default() -> Self {
        Self {
            a_r: 0.2126,
            a_g: 0.7152,
            a_b: 0.0722,
        }
    }
}

/// Projects an RGB image to a single intensity channel,
/// `I = a_r * r + a_g * g + a_b * b` per pixel.
///
/// Coefficient sets whose sum exceeds one saturate at 1.0; the default
/// weights sum to exactly one and never clip.
pub fn rgb_to_intensity(
    img: &ImageTensor,
    coeffs: GrayscaleCoefficients,
) -> Result<ImageTensor, ImageError> {
    if img.channels() != 3 {
        return Err(ImageError::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    let data = img
        .pixels()
        .map(|px| (coeffs.a_r * px[0] + coeffs.a_g * px[1] + coeffs.a_b * px[2]).min(1.0))
        .collect();
    ImageTensor::new(img.height(), img.width(), 1, data)
}

/// Mean squared error over all N elements.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64, ImageError> {
    a.require_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in decibels, with peak fixed at 1.0.
///
/// Identical images yield `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, ImageError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / m).log10())
    }
}
