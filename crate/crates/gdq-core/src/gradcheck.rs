//! Finite-difference validation of every analytic derivative in the crate:
//! the three smooth quantizer relaxations (input, sharpness, threshold
//! partials), the generator's vector-Jacobian product, and the full
//! restoration objective including its sharpness and threshold paths.
//!
//! Each check compares analytic values against central finite differences
//! (step 1e-5) at seeded random evaluation points and records the maximum
//! relative error `|a - fd| / (max(|a|, |fd|) + 1e-8)`. Candidate points
//! where a derivative falls inside the finite-difference noise band, or
//! where the stencil would straddle an activation kink, are resampled:
//! there the relative comparison measures stencil conditioning rather than
//! formula correctness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generator::{GeneratorModel, LatentVector};
use crate::image::{rgb_to_intensity, GrayscaleCoefficients};
use crate::quantize::{PaletteQuantizer, ThresholdQuantizer, UniformQuantizer};
use crate::restore::{loss_and_grads, loss_value, ObjectiveSpec, ObjectiveVariant};
use crate::surrogate::{
    soft_palette, soft_threshold, soft_uniform, SurrogateKind, SurrogateParams,
};

/// Central-difference step size used throughout the suite.
pub const FD_STEP: f64 = 1e-5;
/// Relative error above which a derivative check fails.
pub const TOLERANCE: f64 = 1e-4;

/// Derivatives smaller than this (but nonzero) leave the comparison
/// dominated by stencil truncation error; such points are resampled.
const NOISE_BAND_HIGH: f64 = 1e-3;
const NOISE_BAND_LOW: f64 = 1e-13;

/// Margin kept between an evaluation point and the nearest piecewise
/// activation kink so the stencil stays on one smooth branch.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// One line per check plus a verdict line, for terminal output.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<34} max rel err {:.3e} over {} points (tolerance {:.0e}) {}\n",
                c.name,
                c.max_rel_err,
                c.points,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" },
            ));
        }
        out
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

fn conditioned(value: f64) -> bool {
    let a = value.abs();
    a >= NOISE_BAND_HIGH || a <= NOISE_BAND_LOW
}

fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Runs `points` accepted evaluation points of `point_fn`, which returns
/// the worst relative error at an accepted point or `None` to resample.
fn run_check(
    name: &'static str,
    seed: u64,
    points: usize,
    mut point_fn: impl FnMut(&mut ChaCha8Rng) -> Option<f64>,
) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut attempts = 0;
    while accepted < points {
        attempts += 1;
        assert!(
            attempts <= points * 1000,
            "check {name}: could not find {points} well-conditioned points"
        );
        if let Some(err) = point_fn(&mut rng) {
            max_rel_err = max_rel_err.max(err);
            accepted += 1;
        }
    }
    CheckResult {
        name,
        points,
        max_rel_err,
        tolerance: TOLERANCE,
    }
}

fn sample_k(rng: &mut ChaCha8Rng) -> f64 {
    (rng.random_range(0.5f64.ln()..20.0f64.ln())).exp()
}

/// Runs the whole derivative suite.
///
/// `corruption` is a test hook: it is added to the analytic input
/// derivative of the first check so failure reporting can be exercised;
/// production callers pass `0.0`.
pub fn run_gradient_checks(seed: u64, points: usize, corruption: f64) -> GradCheckReport {
    let checks = vec![
        check_soft_uniform_input(seed, points, corruption),
        check_soft_uniform_sharpness(seed.wrapping_add(1), points),
        check_soft_palette_jacobian(seed.wrapping_add(2), points),
        check_soft_palette_sharpness(seed.wrapping_add(3), points),
        check_soft_threshold(seed.wrapping_add(4), points),
        check_generator_vjp(seed.wrapping_add(5), points),
        check_objective_uniform_path(seed.wrapping_add(6), points),
        check_objective_threshold_path(seed.wrapping_add(7), points),
    ];
    GradCheckReport { checks }
}

fn check_soft_uniform_input(seed: u64, points: usize, corruption: f64) -> CheckResult {
    run_check("smooth uniform: input", seed, points, |rng| {
        let quant = UniformQuantizer::new(rng.random_range(1..7)).unwrap();
        let k = sample_k(rng);
        let r = rng.random_range(0.05..0.95);
        let eval = soft_uniform(r, &quant, k);
        if !conditioned(eval.d_input) {
            return None;
        }
        let numeric = fd(|x| soft_uniform(x, &quant, k).value, r);
        Some(rel_err(eval.d_input + corruption, numeric))
    })
}

fn check_soft_uniform_sharpness(seed: u64, points: usize) -> CheckResult {
    run_check("smooth uniform: sharpness", seed, points, |rng| {
        let quant = UniformQuantizer::new(rng.random_range(1..7)).unwrap();
        let k = sample_k(rng);
        let r = rng.random_range(0.05..0.95);
        let eval = soft_uniform(r, &quant, k);
        if !conditioned(eval.d_kappa) {
            return None;
        }
        let numeric = fd(|x| soft_uniform(r, &quant, x.exp()).value, k.ln());
        Some(rel_err(eval.d_kappa, numeric))
    })
}

fn random_palette(rng: &mut ChaCha8Rng) -> PaletteQuantizer {
    let m = rng.random_range(2..5);
    let colors = (0..m)
        .map(|_| {
            [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ]
        })
        .collect();
    PaletteQuantizer::new(colors).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ]
}

fn check_soft_palette_jacobian(seed: u64, points: usize) -> CheckResult {
    run_check("smooth palette: jacobian", seed, points, |rng| {
        let palette = random_palette(rng);
        let k = sample_k(rng);
        let x = random_point(rng);
        let eval = soft_palette(x, &palette, k);
        if eval.jacobian.iter().flatten().any(|&j| !conditioned(j)) {
            return None;
        }
        let mut worst: f64 = 0.0;
        for b in 0..3 {
            for a in 0..3 {
                let numeric = fd(
                    |t| {
                        let mut xt = x;
                        xt[b] = t;
                        soft_palette(xt, &palette, k).value[a]
                    },
                    x[b],
                );
                worst = worst.max(rel_err(eval.jacobian[a][b], numeric));
            }
        }
        Some(worst)
    })
}

fn check_soft_palette_sharpness(seed: u64, points: usize) -> CheckResult {
    run_check("smooth palette: sharpness", seed, points, |rng| {
        let palette = random_palette(rng);
        let k = sample_k(rng);
        let x = random_point(rng);
        let eval = soft_palette(x, &palette, k);
        if eval.d_kappa.iter().any(|&d| !conditioned(d)) {
            return None;
        }
        let mut worst: f64 = 0.0;
        for a in 0..3 {
            let numeric = fd(|t| soft_palette(x, &palette, t.exp()).value[a], k.ln());
            worst = worst.max(rel_err(eval.d_kappa[a], numeric));
        }
        Some(worst)
    })
}

fn check_soft_threshold(seed: u64, points: usize) -> CheckResult {
    run_check("smooth threshold: all partials", seed, points, |rng| {
        let k = sample_k(rng);
        let delta = rng.random_range(0.2..0.8);
        let intensity = rng.random_range(0.05..0.95);
        let eval = soft_threshold(intensity, k, delta);
        let all_conditioned =
            conditioned(eval.d_input) && conditioned(eval.d_kappa) && conditioned(eval.d_delta_raw);
        if !all_conditioned {
            return None;
        }
        let delta_raw = (delta / (1.0 - delta)).ln();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let num_input = fd(|x| soft_threshold(x, k, delta).value, intensity);
        let num_kappa = fd(|x| soft_threshold(intensity, x.exp(), delta).value, k.ln());
        let num_delta = fd(|x| soft_threshold(intensity, k, sig(x)).value, delta_raw);
        Some(
            rel_err(eval.d_input, num_input)
                .max(rel_err(eval.d_kappa, num_kappa))
                .max(rel_err(eval.d_delta_raw, num_delta)),
        )
    })
}

/// A latent vector whose leaky-ReLU pre-activations keep a safe margin
/// from their kinks under `model`; the final layer (sigmoid or clamp-free)
/// is not constrained.
fn kink_free(model: &GeneratorModel, z: &LatentVector) -> bool {
    let (_, tape) = model.forward_with_tape(z).expect("matching latent dim");
    let leaky_layers = model.layers().len() - 1; // the final layer is sigmoid
    tape.pre_activations()[..leaky_layers]
        .iter()
        .flatten()
        .all(|&p| p.abs() >= KINK_MARGIN)
}

fn check_generator_vjp(seed: u64, points: usize) -> CheckResult {
    run_check("generator: vector-Jacobian product", seed, points, |rng| {
        let latent_dim = rng.random_range(2..5);
        let hidden = [rng.random_range(3..7), rng.random_range(3..7)];
        let model = GeneratorModel::mlp(rng.random::<u64>(), latent_dim, &hidden, 2, 2, 1).unwrap();
        let z = LatentVector::standard_normal(latent_dim, rng);
        if !kink_free(&model, &z) {
            return None;
        }
        let upstream: Vec<f64> = (0..model.output_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let grad = model.vjp(&z, &upstream).unwrap();
        if grad.iter().any(|&g| !conditioned(g)) {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (j, &analytic) in grad.iter().enumerate() {
            let numeric = fd(
                |t| {
                    let mut zz = z.clone();
                    zz.values_mut()[j] = t;
                    model
                        .forward(&zz)
                        .unwrap()
                        .data()
                        .iter()
                        .zip(&upstream)
                        .map(|(o, u)| o * u)
                        .sum()
                },
                z.values()[j],
            );
            worst = worst.max(rel_err(analytic, numeric));
        }
        Some(worst)
    })
}

fn check_objective_uniform_path(seed: u64, points: usize) -> CheckResult {
    run_check("objective: latent + sharpness", seed, points, |rng| {
        let model = GeneratorModel::mlp(rng.random::<u64>(), 2, &[5], 2, 2, 3).unwrap();
        let z_true = LatentVector::standard_normal(2, rng);
        let truth = model.forward(&z_true).unwrap();
        let m = rng.random_range(2..6);
        let observation = UniformQuantizer::new(m).unwrap().quantize(&truth);
        let params = SurrogateParams::with_k(rng.random_range(2.0..12.0)).unwrap();
        let kind = SurrogateKind::SoftUniform(UniformQuantizer::new(m).unwrap());
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            kind,
            params,
            &model,
            &observation,
            None,
        )
        .unwrap();
        let z = LatentVector::new(vec![
            0.7 * rng.random_range(-1.0..1.0),
            0.7 * rng.random_range(-1.0..1.0),
        ])
        .unwrap();
        if !kink_free(&model, &z) {
            return None;
        }
        let eval = loss_and_grads(&spec, &z, &params, 1e-12).unwrap();
        let well = eval.grad_z.iter().all(|&g| conditioned(g)) && conditioned(eval.grad_kappa);
        if !well {
            return None;
        }
        let mut worst: f64 = 0.0;
        for j in 0..2 {
            let numeric = fd(
                |t| {
                    let mut zz = z.clone();
                    zz.values_mut()[j] = t;
                    loss_value(&spec, &zz, &params, 1e-12).unwrap().total
                },
                z.values()[j],
            );
            worst = worst.max(rel_err(eval.grad_z[j], numeric));
        }
        let numeric = fd(
            |t| {
                let mut p = params;
                p.set_kappa(t);
                loss_value(&spec, &z, &p, 1e-12).unwrap().total
            },
            params.kappa(),
        );
        Some(worst.max(rel_err(eval.grad_kappa, numeric)))
    })
}

fn check_objective_threshold_path(seed: u64, points: usize) -> CheckResult {
    run_check("objective: threshold path", seed, points, |rng| {
        let model = GeneratorModel::mlp(rng.random::<u64>(), 2, &[5], 2, 2, 3).unwrap();
        let z_true = LatentVector::standard_normal(2, rng);
        let truth = model.forward(&z_true).unwrap();
        let coeffs = GrayscaleCoefficients::default();
        let intensity = rgb_to_intensity(&truth, coeffs).unwrap();
        let delta_true = rng.random_range(0.3..0.7);
        let observation = ThresholdQuantizer::new(delta_true)
            .unwrap()
            .quantize(&intensity)
            .unwrap();
        let params = SurrogateParams::with_k_delta(
            rng.random_range(2.0..10.0),
            rng.random_range(0.35..0.65),
        )
        .unwrap();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            SurrogateKind::SoftThreshold,
            params,
            &model,
            &observation,
            Some(coeffs),
        )
        .unwrap();
        let z = LatentVector::new(vec![
            0.7 * rng.random_range(-1.0..1.0),
            0.7 * rng.random_range(-1.0..1.0),
        ])
        .unwrap();
        if !kink_free(&model, &z) {
            return None;
        }
        let eval = loss_and_grads(&spec, &z, &params, 1e-12).unwrap();
        let well = eval.grad_z.iter().all(|&g| conditioned(g))
            && conditioned(eval.grad_kappa)
            && conditioned(eval.grad_delta_raw);
        if !well {
            return None;
        }
        let mut worst: f64 = 0.0;
        for j in 0..2 {
            let numeric = fd(
                |t| {
                    let mut zz = z.clone();
                    zz.values_mut()[j] = t;
                    loss_value(&spec, &zz, &params, 1e-12).unwrap().total
                },
                z.values()[j],
            );
            worst = worst.max(rel_err(eval.grad_z[j], numeric));
        }
        let numeric = fd(
            |t| {
                let mut p = params;
                p.set_kappa(t);
                loss_value(&spec, &z, &p, 1e-12).unwrap().total
            },
            params.kappa(),
        );
        worst = worst.max(rel_err(eval.grad_kappa, numeric));
        let numeric = fd(
            |t| {
                let mut p = params;
                p.set_delta_raw(t);
                loss_value(&spec, &z, &p, 1e-12).unwrap().total
            },
            params.delta_raw().unwrap(),
        );
        Some(worst.max(rel_err(eval.grad_delta_raw, numeric)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_suite_passes_at_modest_point_counts() {
        let report = run_gradient_checks(1, 25, 0.0);
        assert!(report.passed(), "\n{}", report.summary());
        assert_eq!(report.checks.len(), 8);
        for check in &report.checks {
            assert_eq!(check.points, 25);
        }
    }

    #[test]
    fn corruption_hook_fails_the_input_check() {
        let report = run_gradient_checks(1, 5, 1e-2);
        assert!(!report.passed());
        assert!(!report.checks[0].passed());
        assert!(report.checks[1].passed());
        assert!(report.summary().contains("FAIL"));
    }

    #[test]
    fn summary_lists_every_check() {
        let report = run_gradient_checks(3, 3, 0.0);
        let summary = report.summary();
        assert_eq!(summary.lines().count(), report.checks.len());
        assert!(summary.contains("generator"));
        assert!(summary.contains("ok"));
    }
}
