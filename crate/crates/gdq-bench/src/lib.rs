//! Shared fixtures for the benchmark suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdq_core::{GeneratorModel, ImageTensor, LatentVector};

/// A seeded random RGB image of the given side length.
pub fn random_image(side: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..side * side * channels)
        .map(|_| rng.random::<f64>())
        .collect();
    ImageTensor::new(side, side, channels, data).expect("uniform draws are valid pixels")
}

/// The toy-scale generator used across the benchmarks.
pub fn bench_model() -> GeneratorModel {
    GeneratorModel::mlp(7, 8, &[32], 16, 16, 3).expect("fixed architecture is valid")
}

/// A seeded latent matching [`bench_model`].
pub fn bench_latent(seed: u64) -> LatentVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentVector::standard_normal(8, &mut rng)
}
