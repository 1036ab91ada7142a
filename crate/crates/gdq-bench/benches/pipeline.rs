use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gdq_bench::{bench_latent, bench_model, random_image};
use gdq_core::quantize::{kmeans_palette, otsu_threshold};
use gdq_core::restore::{restore, ObjectiveSpec, ObjectiveVariant, OptimizerConfig};
use gdq_core::surrogate::apply_surrogate;
use gdq_core::{
    rgb_to_intensity, GrayscaleCoefficients, PaletteQuantizer, SurrogateKind, SurrogateParams,
    ThresholdQuantizer, UniformQuantizer,
};

fn bench_quantizers(c: &mut Criterion) {
    let img = random_image(64, 3, 1);
    let intensity = rgb_to_intensity(&img, GrayscaleCoefficients::default()).unwrap();
    let uniform = UniformQuantizer::new(5).unwrap();
    let palette = PaletteQuantizer::grid(2).unwrap();
    let threshold = ThresholdQuantizer::new(0.5).unwrap();

    c.bench_function("quantize/uniform_64", |b| {
        b.iter(|| uniform.quantize(black_box(&img)))
    });
    c.bench_function("quantize/palette8_64", |b| {
        b.iter(|| palette.quantize(black_box(&img)).unwrap())
    });
    c.bench_function("quantize/threshold_64", |b| {
        b.iter(|| threshold.quantize(black_box(&intensity)).unwrap())
    });
    c.bench_function("quantize/otsu_64", |b| {
        b.iter(|| otsu_threshold(black_box(&intensity)).unwrap())
    });
    c.bench_function("quantize/kmeans8_64", |b| {
        b.iter(|| kmeans_palette(black_box(&img), 8, 0).unwrap())
    });
}

fn bench_surrogates(c: &mut Criterion) {
    let img = random_image(64, 3, 2);
    let intensity = rgb_to_intensity(&img, GrayscaleCoefficients::default()).unwrap();
    let uniform = SurrogateKind::SoftUniform(UniformQuantizer::new(5).unwrap());
    let palette = SurrogateKind::SoftPalette(PaletteQuantizer::grid(2).unwrap());
    let sharp = SurrogateParams::with_k(100.0).unwrap();
    let sharp_delta = SurrogateParams::with_k_delta(100.0, 0.5).unwrap();

    c.bench_function("surrogate/soft_uniform_64", |b| {
        b.iter(|| apply_surrogate(black_box(&img), &uniform, &sharp).unwrap())
    });
    c.bench_function("surrogate/soft_palette8_64", |b| {
        b.iter(|| apply_surrogate(black_box(&img), &palette, &sharp).unwrap())
    });
    c.bench_function("surrogate/soft_threshold_64", |b| {
        b.iter(|| {
            apply_surrogate(
                black_box(&intensity),
                &SurrogateKind::SoftThreshold,
                &sharp_delta,
            )
            .unwrap()
        })
    });
}

fn bench_generator(c: &mut Criterion) {
    let model = bench_model();
    let z = bench_latent(3);
    let upstream = vec![1.0; model.output_len()];

    c.bench_function("generator/forward_16x16", |b| {
        b.iter(|| model.forward(black_box(&z)).unwrap())
    });
    c.bench_function("generator/vjp_16x16", |b| {
        b.iter(|| model.vjp(black_box(&z), black_box(&upstream)).unwrap())
    });
}

fn bench_restore(c: &mut Criterion) {
    let model = bench_model();
    let quantizer = UniformQuantizer::new(3).unwrap();
    let observation = quantizer.quantize(&model.forward(&bench_latent(4)).unwrap());
    let spec = ObjectiveSpec::new(
        ObjectiveVariant::Full,
        SurrogateKind::SoftUniform(quantizer),
        SurrogateParams::default_init(),
        &model,
        &observation,
        None,
    )
    .unwrap();
    let config = OptimizerConfig {
        iterations: 100,
        learning_rate: 0.01,
        momentum: 0.9,
        seed: 5,
        ..OptimizerConfig::default()
    };

    // 100 iterations amortizes the setup; divide by 100 for per-step cost.
    c.bench_function("restore/100_steps_16x16", |b| {
        b.iter(|| restore(black_box(&spec), black_box(&config)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_quantizers,
    bench_surrogates,
    bench_generator,
    bench_restore
);
criterion_main!(benches);
