//! Image de-quantization by MAP estimation over the latent input of a
//! generative prior.
//!
//! The pipeline has four layers:
//!
//! * [`image`] / [`io`] — unit-interval image tensors and 8-bit file I/O.
//! * [`quantize`] — the forward degradations: uniform intensity
//!   quantization, nearest-palette mapping, and binary thresholding,
//!   plus Otsu threshold selection and k-means palette extraction.
//! * [`surrogate`] — differentiable softmax/sigmoid relaxations of those
//!   quantizers with analytic derivatives in the input and in the
//!   quantizer parameters.
//! * [`generator`] / [`restore`] — a dense feed-forward image generator
//!   with hand-written reverse-mode derivatives, and the optimizer that
//!   descends the restoration objective over the latent vector (and,
//!   optionally, the quantizer parameters).
//!
//! [`gradcheck`] validates every analytic derivative against central
//! finite differences and is wired into the CLI as a self-test.

pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod quantize;
pub mod restore;
pub mod surrogate;

pub use generator::{Activation, DenseLayer, GeneratorModel, LatentVector, ModelError};
pub use image::{mse, psnr, rgb_to_intensity, GrayscaleCoefficients, ImageError, ImageTensor};
pub use io::{load_image, save_image, FormatError};
pub use quantize::{
    kmeans_palette, otsu_threshold, read_palette, write_palette, PaletteQuantizer, QuantizeError,
    ThresholdQuantizer, UniformQuantizer,
};
pub use restore::{
    delta_error_variance, read_trace_csv, restore, restore_with_unknown_threshold,
    write_delta_variance_csv, write_trace_csv, LossValue, ObjectiveSpec, ObjectiveVariant,
    OptimizerConfig, Restoration, RestoreError, RunTrace, TracePoint,
};
pub use surrogate::{SurrogateError, SurrogateKind, SurrogateOutput, SurrogateParams};
