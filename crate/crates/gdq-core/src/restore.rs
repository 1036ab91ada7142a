//! The restoration objective and its optimizer.
//!
//! Given an observation `Y` produced by quantizing an unknown image, a
//! generator `G` with a standard normal prior on its latent input `Z`, and a
//! differentiable surrogate `T` for the quantizer with parameters
//! `(k, delta)`, the restored image is `G(Z*)` where `(Z*, k*, delta*)`
//! minimizes
//!
//! ```text
//! L(Z, k, delta) = N * ln(max(S, eps)) + ||Z||^2,
//! S = ||Y - T(G(Z))||^2
//! ```
//!
//! and `N` is the observation dimension. The Gaussian noise variance has
//! been eliminated analytically; its implied estimate `S / N` is reported
//! along every trace. The identity variant drops `T` and fits `G(Z)` (or
//! its grayscale projection) directly to `Y`.
//!
//! Minimization runs joint normalized-momentum descent: each parameter
//! block (latent vector, raw sharpness, raw threshold) is updated with its
//! gradient scaled to unit L2 norm, so one learning rate serves blocks of
//! very different sizes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generator::{GeneratorModel, LatentVector, ModelError};
use crate::image::{rgb_to_intensity, GrayscaleCoefficients, ImageError, ImageTensor};
use crate::surrogate::{apply_surrogate, SurrogateError, SurrogateKind, SurrogateParams};

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error("the identity objective variant requires the identity surrogate kind")]
    IdentityVariantKind,
    #[error("the grayscale projection requires a 3-channel generator output")]
    ProjectionNeedsRgb,
    #[error("objective input shape {got:?} does not match observation shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(
        "threshold restoration requires the soft-threshold surrogate with trainable k and delta"
    )]
    NotAThresholdProblem,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("optimizer config invalid: {0}")]
    BadConfig(String),
    #[error("optimization diverged to non-finite values at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        trace: Box<RunTrace>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed trace row: {detail}")]
    MalformedTrace {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("ensemble traces must share one iteration grid")]
    EnsembleShapeMismatch,
    #[error("ensemble has {traces} traces but {truths} ground-truth thresholds")]
    EnsembleTruthCount { traces: usize, truths: usize },
    #[error("trace carries no threshold estimates")]
    MissingDeltaTrace,
}

/// Which objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveVariant {
    /// Fit the surrogate-transformed generator output to the observation.
    Full,
    /// Fit the generator output itself to the observation, with no
    /// quantization model in the loop.
    Identity,
}

/// A fully validated restoration problem: observation, generator,
/// surrogate, and the optional RGB-to-intensity projection between them.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec<'a> {
    variant: ObjectiveVariant,
    kind: SurrogateKind,
    init_params: SurrogateParams,
    generator: &'a GeneratorModel,
    observation: &'a ImageTensor,
    projection: Option<GrayscaleCoefficients>,
}

impl<'a> ObjectiveSpec<'a> {
    pub fn new(
        variant: ObjectiveVariant,
        kind: SurrogateKind,
        init_params: SurrogateParams,
        generator: &'a GeneratorModel,
        observation: &'a ImageTensor,
        projection: Option<GrayscaleCoefficients>,
    ) -> Result<Self, RestoreError> {
        if variant == ObjectiveVariant::Identity && !matches!(kind, SurrogateKind::Identity) {
            return Err(RestoreError::IdentityVariantKind);
        }
        let (height, width, channels) = generator.output_shape();
        let fitted_shape = match projection {
            Some(_) => {
                if channels != 3 {
                    return Err(RestoreError::ProjectionNeedsRgb);
                }
                (height, width, 1)
            }
            None => (height, width, channels),
        };
        if fitted_shape != observation.shape() {
            return Err(RestoreError::ShapeMismatch {
                expected: observation.shape(),
                got: fitted_shape,
            });
        }
        if let Some(expected) = kind.required_channels() {
            if fitted_shape.2 != expected {
                return Err(SurrogateError::ChannelMismatch {
                    kind: kind.name(),
                    expected,
                    actual: fitted_shape.2,
                }
                .into());
            }
        }
        if kind.needs_delta() && init_params.delta_raw().is_none() {
            return Err(SurrogateError::MissingDelta.into());
        }
        Ok(Self {
            variant,
            kind,
            init_params,
            generator,
            observation,
            projection,
        })
    }

    /// The identity variant: fit `G(Z)` (projected to grayscale when
    /// `projection` is given) directly to the observation.
    pub fn identity_fit(
        generator: &'a GeneratorModel,
        observation: &'a ImageTensor,
        projection: Option<GrayscaleCoefficients>,
    ) -> Result<Self, RestoreError> {
        let mut params = SurrogateParams::default_init();
        params.set_train_k(false);
        Self::new(
            ObjectiveVariant::Identity,
            SurrogateKind::Identity,
            params,
            generator,
            observation,
            projection,
        )
    }

    pub fn variant(&self) -> ObjectiveVariant {
        self.variant
    }

    pub fn kind(&self) -> &SurrogateKind {
        &self.kind
    }

    pub fn init_params(&self) -> SurrogateParams {
        self.init_params
    }

    pub fn generator(&self) -> &GeneratorModel {
        self.generator
    }

    pub fn observation(&self) -> &ImageTensor {
        self.observation
    }

    pub fn projection(&self) -> Option<GrayscaleCoefficients> {
        self.projection
    }

    /// Observation dimension `N` (all channels of all pixels).
    pub fn n(&self) -> usize {
        self.observation.len()
    }
}

/// Descent hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Floor applied to the residual inside the logarithm.
    pub residual_floor: f64,
    /// Every how many iterations a trace point is recorded.
    pub trace_stride: usize,
}

impl Default for OptimizerConfig {
    /// Desk-scale default: the reference hyperparameters with the
    /// iteration budget cut to 20,000 so suites finish in minutes.
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.999,
            iterations: 20_000,
            seed: 0,
            restarts: 1,
            residual_floor: 1e-12,
            trace_stride: 100,
        }
    }
}

impl OptimizerConfig {
    /// The full reference budget of 200,000 iterations.
    pub fn full_budget() -> Self {
        Self {
            iterations: 200_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RestoreError> {
        let bad = |msg: &str| Err(RestoreError::BadConfig(msg.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.iterations == 0 {
            return bad("needs at least one iteration");
        }
        if self.restarts == 0 {
            return bad("needs at least one restart");
        }
        if !(self.residual_floor.is_finite() && self.residual_floor > 0.0) {
            return bad("residual floor must be positive");
        }
        if self.trace_stride == 0 {
            return bad("trace stride must be positive");
        }
        Ok(())
    }
}

/// The objective value, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// `N * ln(max(S, eps))`.
    pub data_term: f64,
    /// `||Z||^2`.
    pub prior_term: f64,
}

/// One evaluation of the objective and all its gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: LossValue,
    /// `S`, the squared residual norm before flooring.
    pub residual: f64,
    pub grad_z: Vec<f64>,
    pub grad_kappa: f64,
    pub grad_delta_raw: f64,
}

/// Evaluates the objective and its exact gradients at `(z, params)`.
///
/// Gradients for parameters whose trainable flag is off are reported as
/// zero, so the optimizer leaves them untouched. Below the residual floor
/// the data term is constant, hence its gradient contribution vanishes.
pub fn loss_and_grads(
    spec: &ObjectiveSpec,
    z: &LatentVector,
    params: &SurrogateParams,
    residual_floor: f64,
) -> Result<ObjectiveEval, RestoreError> {
    let n = spec.n() as f64;
    let (generated, tape) = spec.generator.forward_with_tape(z)?;
    let fitted = match spec.projection {
        Some(coeffs) => rgb_to_intensity(&generated, coeffs)?,
        None => generated.clone(),
    };
    let surrogate = apply_surrogate(&fitted, &spec.kind, params)?;

    let residual: f64 = surrogate
        .output()
        .data()
        .iter()
        .zip(spec.observation.data())
        .map(|(t, y)| (t - y) * (t - y))
        .sum();
    let data_term = n * residual.max(residual_floor).ln();
    let prior_term = z.norm_squared();
    let loss = LossValue {
        total: data_term + prior_term,
        data_term,
        prior_term,
    };

    // d data / d S; the floored log is constant below the floor.
    let dl_ds = if residual > residual_floor {
        n / residual
    } else {
        0.0
    };
    let upstream: Vec<f64> = surrogate
        .output()
        .data()
        .iter()
        .zip(spec.observation.data())
        .map(|(t, y)| 2.0 * dl_ds * (t - y))
        .collect();

    let grad_kappa = if params.train_k() {
        surrogate.vjp_kappa(&upstream)?
    } else {
        0.0
    };
    let grad_delta_raw = if params.train_delta() {
        surrogate.vjp_delta_raw(&upstream)?
    } else {
        0.0
    };

    let grad_fitted = surrogate.vjp_input(&upstream)?;
    let grad_generated = match spec.projection {
        Some(coeffs) => {
            // Backward through intensity = min(a_r r + a_g g + a_b b, 1):
            // the cotangent fans out over the coefficients except where the
            // unsaturated sum already exceeds one.
            let mut grad = Vec::with_capacity(generated.len());
            for (pixel, g) in generated.pixels().zip(&grad_fitted) {
                let raw =
                    coeffs.a_r() * pixel[0] + coeffs.a_g() * pixel[1] + coeffs.a_b() * pixel[2];
                let pass = if raw <= 1.0 { 1.0 } else { 0.0 };
                grad.push(g * coeffs.a_r() * pass);
                grad.push(g * coeffs.a_g() * pass);
                grad.push(g * coeffs.a_b() * pass);
            }
            grad
        }
        None => grad_fitted,
    };

    let mut grad_z = spec.generator.vjp_with_tape(&tape, &grad_generated)?;
    for (g, zv) in grad_z.iter_mut().zip(z.values()) {
        *g += 2.0 * zv;
    }

    Ok(ObjectiveEval {
        loss,
        residual,
        grad_z,
        grad_kappa,
        grad_delta_raw,
    })
}

/// The objective value alone.
pub fn loss_value(
    spec: &ObjectiveSpec,
    z: &LatentVector,
    params: &SurrogateParams,
    residual_floor: f64,
) -> Result<LossValue, RestoreError> {
    loss_and_grads(spec, z, params, residual_floor).map(|eval| eval.loss)
}

/// One normalized-momentum update of a parameter block:
/// `v <- momentum * v + g / max(||g||, 1e-12)`, then
/// `theta <- theta - learning_rate * v`.
pub fn normalized_momentum_step(
    theta: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    learning_rate: f64,
    momentum: f64,
) {
    debug_assert_eq!(theta.len(), velocity.len());
    debug_assert_eq!(theta.len(), grad.len());
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-12);
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g / norm;
        *t -= learning_rate * *v;
    }
}

/// One subsampled snapshot of a run, taken before the update of the
/// iteration it is labeled with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub loss: f64,
    /// Squared residual norm `S`.
    pub residual: f64,
    pub znorm2: f64,
    /// Sharpness estimate; NaN when the objective has no sharpness.
    pub k: f64,
    /// Threshold estimate; NaN when the objective has no threshold.
    pub delta: f64,
    /// Implied noise variance `S / N`.
    pub beta2: f64,
}

/// Subsampled history of one restoration run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub points: Vec<TracePoint>,
    /// Raised when the observation is constant, in which case the
    /// threshold estimate is not identified by the data.
    pub delta_unconstrained: bool,
}

/// The outcome of a restoration run.
#[derive(Debug, Clone)]
pub struct Restoration {
    pub latent: LatentVector,
    pub params: SurrogateParams,
    pub image: ImageTensor,
    pub trace: RunTrace,
    pub loss: LossValue,
}

impl Restoration {
    /// Convenience accessor for the estimated threshold.
    pub fn delta(&self) -> Option<f64> {
        self.params.delta()
    }
}

/// Minimizes the objective over the latent vector and any trainable
/// surrogate parameters.
///
/// Each restart draws a fresh standard normal latent from a seed derived
/// from `config.seed`, runs the full iteration budget, and the restart with
/// the lowest final total loss wins. Deterministic given `(spec, config)`.
pub fn restore(
    spec: &ObjectiveSpec,
    config: &OptimizerConfig,
) -> Result<Restoration, RestoreError> {
    config.validate()?;
    let mut best: Option<Restoration> = None;
    for restart in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64));
        let z0 = LatentVector::standard_normal(spec.generator.latent_dim(), &mut rng);
        let run = run_descent(spec, config, z0)?;
        if best.as_ref().is_none_or(|b| run.loss.total < b.loss.total) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// [`restore`] for the unknown-threshold problem; the supplied
/// [`ObjectiveSpec`] must use the soft-threshold surrogate with both
/// sharpness and threshold trainable.
pub fn restore_with_unknown_threshold(
    spec: &ObjectiveSpec,
    config: &OptimizerConfig,
) -> Result<Restoration, RestoreError> {
    let threshold_ready = matches!(spec.kind, SurrogateKind::SoftThreshold)
        && spec.init_params.train_k()
        && spec.init_params.train_delta();
    if !threshold_ready {
        return Err(RestoreError::NotAThresholdProblem);
    }
    restore(spec, config)
}

/// Divergence check: normalized momentum can drive `kappa` past the range
/// where `exp` overflows, after which the surrogate derivatives (and then
/// the latent itself) turn NaN. Catching the state here converts that into
/// the documented abort-with-trace error instead of a poisoned run.
fn state_is_finite(z: &LatentVector, params: &SurrogateParams, has_k: bool) -> bool {
    z.values().iter().all(|v| v.is_finite())
        && (!has_k || params.k().is_finite())
        && params.delta_raw().is_none_or(f64::is_finite)
}

fn run_descent(
    spec: &ObjectiveSpec,
    config: &OptimizerConfig,
    z0: LatentVector,
) -> Result<Restoration, RestoreError> {
    let n = spec.n() as f64;
    let has_k = !matches!(spec.kind, SurrogateKind::Identity);
    let mut z = z0;
    let mut params = spec.init_params;
    let mut velocity_z = vec![0.0; z.dim()];
    let mut velocity_kappa = [0.0];
    let mut velocity_delta = [0.0];
    let mut trace = RunTrace {
        points: Vec::with_capacity(config.iterations.div_ceil(config.trace_stride)),
        delta_unconstrained: matches!(spec.kind, SurrogateKind::SoftThreshold)
            && spec.observation.is_constant(),
    };

    for iter in 0..config.iterations {
        if !state_is_finite(&z, &params, has_k) {
            return Err(RestoreError::NonFiniteLoss {
                iteration: iter,
                trace: Box::new(trace),
            });
        }
        let eval = loss_and_grads(spec, &z, &params, config.residual_floor)?;
        if !eval.loss.total.is_finite() {
            return Err(RestoreError::NonFiniteLoss {
                iteration: iter,
                trace: Box::new(trace),
            });
        }
        if iter % config.trace_stride == 0 {
            trace.points.push(TracePoint {
                iter,
                loss: eval.loss.total,
                residual: eval.residual,
                znorm2: eval.loss.prior_term,
                k: if has_k { params.k() } else { f64::NAN },
                delta: params.delta().unwrap_or(f64::NAN),
                beta2: eval.residual / n,
            });
        }

        normalized_momentum_step(
            z.values_mut(),
            &mut velocity_z,
            &eval.grad_z,
            config.learning_rate,
            config.momentum,
        );
        if params.train_k() {
            let mut kappa = [params.kappa()];
            normalized_momentum_step(
                &mut kappa,
                &mut velocity_kappa,
                &[eval.grad_kappa],
                config.learning_rate,
                config.momentum,
            );
            params.set_kappa(kappa[0]);
        }
        if params.train_delta() {
            let mut delta_raw = [params.delta_raw().expect("trainable delta is present")];
            normalized_momentum_step(
                &mut delta_raw,
                &mut velocity_delta,
                &[eval.grad_delta_raw],
                config.learning_rate,
                config.momentum,
            );
            params.set_delta_raw(delta_raw[0]);
        }
    }

    if !state_is_finite(&z, &params, has_k) {
        return Err(RestoreError::NonFiniteLoss {
            iteration: config.iterations,
            trace: Box::new(trace),
        });
    }
    let final_eval = loss_and_grads(spec, &z, &params, config.residual_floor)?;
    let image = spec.generator.forward(&z)?;
    Ok(Restoration {
        latent: z,
        params,
        image,
        trace,
        loss: final_eval.loss,
    })
}

/// Writes a trace as CSV with the fixed column set
/// `iter,loss,S,znorm2,k,delta,beta2`.
pub fn write_trace_csv(trace: &RunTrace, path: impl AsRef<Path>) -> Result<(), RestoreError> {
    let path = path.as_ref();
    let mut out = String::from("iter,loss,S,znorm2,k,delta,beta2\n");
    for p in &trace.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.iter, p.loss, p.residual, p.znorm2, p.k, p.delta, p.beta2
        ));
    }
    fs::write(path, out).map_err(|source| RestoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a trace CSV written by [`write_trace_csv`].
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<RunTrace, RestoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| RestoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let malformed = |line: usize, detail: String| RestoreError::MalformedTrace {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "iter,loss,S,znorm2,k,delta,beta2")) => {}
        Some((_, other)) => return Err(malformed(1, format!("unexpected header {other:?}"))),
        None => return Err(malformed(1, "empty file".into())),
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(malformed(
                idx + 1,
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let float = |i: usize| -> Result<f64, RestoreError> {
            fields[i]
                .parse()
                .map_err(|e| malformed(idx + 1, format!("bad number {:?}: {e}", fields[i])))
        };
        points.push(TracePoint {
            iter: fields[0]
                .parse()
                .map_err(|e| malformed(idx + 1, format!("bad iteration {:?}: {e}", fields[0])))?,
            loss: float(1)?,
            residual: float(2)?,
            znorm2: float(3)?,
            k: float(4)?,
            delta: float(5)?,
            beta2: float(6)?,
        });
    }
    Ok(RunTrace {
        points,
        delta_unconstrained: false,
    })
}

/// Pointwise mean squared threshold error across an ensemble of runs:
/// one `(iteration, mean((delta_hat - delta_true)^2))` row per trace point.
///
/// All traces must share the same iteration grid and carry threshold
/// estimates; `truths` pairs with `traces` by index.
pub fn delta_error_variance(
    traces: &[RunTrace],
    truths: &[f64],
) -> Result<Vec<(usize, f64)>, RestoreError> {
    if traces.len() != truths.len() {
        return Err(RestoreError::EnsembleTruthCount {
            traces: traces.len(),
            truths: truths.len(),
        });
    }
    let first = traces.first().ok_or(RestoreError::EnsembleShapeMismatch)?;
    let grid: Vec<usize> = first.points.iter().map(|p| p.iter).collect();
    if grid.is_empty() {
        return Err(RestoreError::EnsembleShapeMismatch);
    }
    for trace in traces {
        let same = trace.points.len() == grid.len()
            && trace.points.iter().zip(&grid).all(|(p, &i)| p.iter == i);
        if !same {
            return Err(RestoreError::EnsembleShapeMismatch);
        }
        if trace.points.iter().any(|p| p.delta.is_nan()) {
            return Err(RestoreError::MissingDeltaTrace);
        }
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(row, &iter)| {
            let mean_sq = traces
                .iter()
                .zip(truths)
                .map(|(t, truth)| (t.points[row].delta - truth).powi(2))
                .sum::<f64>()
                / traces.len() as f64;
            (iter, mean_sq)
        })
        .collect())
}

/// Writes the [`delta_error_variance`] rows as CSV with header
/// `iter,delta_err_var`.
pub fn write_delta_variance_csv(
    rows: &[(usize, f64)],
    path: impl AsRef<Path>,
) -> Result<(), RestoreError> {
    let path = path.as_ref();
    let mut out = String::from("iter,delta_err_var\n");
    for (iter, var) in rows {
        out.push_str(&format!("{iter},{var}\n"));
    }
    fs::write(path, out).map_err(|source| RestoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{ThresholdQuantizer, UniformQuantizer};

    const FLOOR: f64 = 1e-12;

    fn uniform_kind(m: usize) -> SurrogateKind {
        SurrogateKind::SoftUniform(UniformQuantizer::new(m).unwrap())
    }

    #[test]
    fn zero_latent_has_zero_prior_term() {
        let model = GeneratorModel::identity(2, 2, 1).unwrap();
        let y = ImageTensor::constant(2, 2, 1, 0.25).unwrap();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let eval =
            loss_and_grads(&spec, &LatentVector::zeros(4), &spec.init_params(), FLOOR).unwrap();
        assert_eq!(eval.loss.prior_term, 0.0);
        assert_eq!(eval.loss.total, eval.loss.data_term);
    }

    #[test]
    fn exact_fit_floors_the_data_term_and_leaves_the_prior_gradient() {
        let model = GeneratorModel::identity(2, 2, 1).unwrap();
        let values = vec![0.2, 0.4, 0.6, 0.8];
        let y = ImageTensor::new(2, 2, 1, values.clone()).unwrap();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let z = LatentVector::new(values.clone()).unwrap();
        let eval = loss_and_grads(&spec, &z, &spec.init_params(), FLOOR).unwrap();
        assert_eq!(eval.residual, 0.0);
        assert_eq!(eval.loss.data_term, 4.0 * FLOOR.ln());
        for (g, v) in eval.grad_z.iter().zip(&values) {
            assert_eq!(*g, 2.0 * v, "prior gradient only");
        }
    }

    /// Full-objective finite-difference check, including the sharpness,
    /// threshold, and grayscale-projection paths.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let h = 1e-5;
        let tol = 1e-4;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs()) + 1e-8);

        // RGB generator fitted through the soft uniform quantizer.
        let model = GeneratorModel::mlp(5, 2, &[4], 2, 2, 3).unwrap();
        let truth = model
            .forward(&LatentVector::new(vec![0.7, -0.4]).unwrap())
            .unwrap();
        let y = UniformQuantizer::new(3).unwrap().quantize(&truth);
        let params = SurrogateParams::with_k(6.0).unwrap();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            uniform_kind(3),
            params,
            &model,
            &y,
            None,
        )
        .unwrap();
        let z = LatentVector::new(vec![0.31, -0.62]).unwrap();
        let eval = loss_and_grads(&spec, &z, &params, FLOOR).unwrap();
        for j in 0..2 {
            let probe = |offset: f64| {
                let mut zz = z.clone();
                zz.values_mut()[j] += offset;
                loss_value(&spec, &zz, &params, FLOOR).unwrap().total
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(
                rel(eval.grad_z[j], fd) < tol,
                "z[{j}]: {} vs {fd}",
                eval.grad_z[j]
            );
        }
        let probe_kappa = |offset: f64| {
            let mut p = params;
            p.set_kappa(params.kappa() + offset);
            loss_value(&spec, &z, &p, FLOOR).unwrap().total
        };
        let fd = (probe_kappa(h) - probe_kappa(-h)) / (2.0 * h);
        assert!(
            rel(eval.grad_kappa, fd) < tol,
            "kappa: {} vs {fd}",
            eval.grad_kappa
        );

        // Grayscale projection into the soft threshold, all three blocks.
        let model = GeneratorModel::mlp(9, 2, &[5], 2, 2, 3).unwrap();
        let truth = model
            .forward(&LatentVector::new(vec![-0.3, 0.9]).unwrap())
            .unwrap();
        let intensity = rgb_to_intensity(&truth, GrayscaleCoefficients::default()).unwrap();
        let y = ThresholdQuantizer::new(0.4)
            .unwrap()
            .quantize(&intensity)
            .unwrap();
        let params = SurrogateParams::with_k_delta(5.0, 0.45).unwrap();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            SurrogateKind::SoftThreshold,
            params,
            &model,
            &y,
            Some(GrayscaleCoefficients::default()),
        )
        .unwrap();
        let z = LatentVector::new(vec![0.55, -0.15]).unwrap();
        let eval = loss_and_grads(&spec, &z, &params, FLOOR).unwrap();
        for j in 0..2 {
            let probe = |offset: f64| {
                let mut zz = z.clone();
                zz.values_mut()[j] += offset;
                loss_value(&spec, &zz, &params, FLOOR).unwrap().total
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(
                rel(eval.grad_z[j], fd) < tol,
                "proj z[{j}]: {} vs {fd}",
                eval.grad_z[j]
            );
        }
        let probe_kappa = |offset: f64| {
            let mut p = params;
            p.set_kappa(params.kappa() + offset);
            loss_value(&spec, &z, &p, FLOOR).unwrap().total
        };
        let fd = (probe_kappa(h) - probe_kappa(-h)) / (2.0 * h);
        assert!(
            rel(eval.grad_kappa, fd) < tol,
            "proj kappa: {} vs {fd}",
            eval.grad_kappa
        );
        let probe_delta = |offset: f64| {
            let mut p = params;
            p.set_delta_raw(params.delta_raw().unwrap() + offset);
            loss_value(&spec, &z, &p, FLOOR).unwrap().total
        };
        let fd = (probe_delta(h) - probe_delta(-h)) / (2.0 * h);
        assert!(
            rel(eval.grad_delta_raw, fd) < tol,
            "proj delta: {} vs {fd}",
            eval.grad_delta_raw
        );
    }

    #[test]
    fn frozen_parameters_report_zero_gradients() {
        let model = GeneratorModel::mlp(5, 2, &[4], 2, 2, 1).unwrap();
        let y = ImageTensor::constant(2, 2, 1, 0.4).unwrap();
        let mut params = SurrogateParams::with_k_delta(8.0, 0.5).unwrap();
        params.set_train_k(false);
        params.set_train_delta(false);
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            SurrogateKind::SoftThreshold,
            params,
            &model,
            &y,
            None,
        )
        .unwrap();
        let eval = loss_and_grads(&spec, &LatentVector::zeros(2), &params, FLOOR).unwrap();
        assert_eq!(eval.grad_kappa, 0.0);
        assert_eq!(eval.grad_delta_raw, 0.0);
    }

    #[test]
    fn spec_validates_variant_shape_and_channel_compatibility() {
        let model = GeneratorModel::identity(2, 2, 1).unwrap();
        let y = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        assert!(matches!(
            ObjectiveSpec::new(
                ObjectiveVariant::Identity,
                uniform_kind(2),
                SurrogateParams::default_init(),
                &model,
                &y,
                None,
            ),
            Err(RestoreError::IdentityVariantKind)
        ));
        let y_big = ImageTensor::constant(3, 2, 1, 0.5).unwrap();
        assert!(matches!(
            ObjectiveSpec::identity_fit(&model, &y_big, None),
            Err(RestoreError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            ObjectiveSpec::identity_fit(&model, &y, Some(GrayscaleCoefficients::default())),
            Err(RestoreError::ProjectionNeedsRgb)
        ));
        // Soft threshold needs a single-channel fit and a threshold value.
        let rgb_model = GeneratorModel::identity(2, 2, 3).unwrap();
        let y_rgb = ImageTensor::constant(2, 2, 3, 0.5).unwrap();
        assert!(matches!(
            ObjectiveSpec::new(
                ObjectiveVariant::Full,
                SurrogateKind::SoftThreshold,
                SurrogateParams::default_init_with_delta(),
                &rgb_model,
                &y_rgb,
                None,
            ),
            Err(RestoreError::Surrogate(
                SurrogateError::ChannelMismatch { .. }
            ))
        ));
        assert!(matches!(
            ObjectiveSpec::new(
                ObjectiveVariant::Full,
                SurrogateKind::SoftThreshold,
                SurrogateParams::default_init(),
                &model,
                &y,
                None,
            ),
            Err(RestoreError::Surrogate(SurrogateError::MissingDelta))
        ));
    }

    #[test]
    fn momentum_step_examples() {
        // Zero gradient on zero velocity is a fixpoint.
        let mut theta = [1.0, -2.0];
        let mut velocity = [0.0, 0.0];
        normalized_momentum_step(&mut theta, &mut velocity, &[0.0, 0.0], 0.1, 0.9);
        assert_eq!(theta, [1.0, -2.0]);

        // Without momentum, a unit-norm gradient moves theta by the
        // learning rate exactly.
        let mut theta = [0.0, 0.0];
        let mut velocity = [0.0, 0.0];
        normalized_momentum_step(&mut theta, &mut velocity, &[0.6, 0.8], 0.1, 0.0);
        assert!((theta[0] + 0.1 * 0.6).abs() < 1e-15);
        assert!((theta[1] + 0.1 * 0.8).abs() < 1e-15);

        // Two identical gradients: second step length is lr * (1 + mu).
        let mut theta = [0.0];
        let mut velocity = [0.0];
        normalized_momentum_step(&mut theta, &mut velocity, &[2.0], 0.1, 0.999);
        let first = theta[0];
        normalized_momentum_step(&mut theta, &mut velocity, &[2.0], 0.1, 0.999);
        let second = theta[0] - first;
        assert!((first + 0.1).abs() < 1e-15);
        assert!((second + 0.1 * 1.999).abs() < 1e-15);
    }

    fn smoke_spec_model() -> (GeneratorModel, ImageTensor) {
        let model = GeneratorModel::mlp(31, 3, &[6], 3, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z_true = LatentVector::standard_normal(3, &mut rng);
        let truth = model.forward(&z_true).unwrap();
        let y = UniformQuantizer::new(2).unwrap().quantize(&truth);
        (model, y)
    }

    #[test]
    fn descent_lowers_the_loss_from_initialization() {
        let (model, y) = smoke_spec_model();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let config = OptimizerConfig {
            iterations: 300,
            learning_rate: 0.02,
            momentum: 0.9,
            trace_stride: 1,
            ..OptimizerConfig::default()
        };
        let result = restore(&spec, &config).unwrap();
        let initial = result.trace.points.first().unwrap().loss;
        assert!(
            result.loss.total < initial,
            "no descent: {initial} -> {}",
            result.loss.total
        );
    }

    #[test]
    fn plain_gradient_descent_is_monotone_with_a_small_step() {
        let (model, y) = smoke_spec_model();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let config = OptimizerConfig {
            iterations: 100,
            learning_rate: 0.001,
            momentum: 0.0,
            trace_stride: 1,
            ..OptimizerConfig::default()
        };
        let result = restore(&spec, &config).unwrap();
        for pair in result.trace.points.windows(2) {
            assert!(
                pair[1].loss <= pair[0].loss + 1e-9,
                "loss rose at iteration {}: {} -> {}",
                pair[1].iter,
                pair[0].loss,
                pair[1].loss
            );
        }
    }

    #[test]
    fn restoration_is_deterministic() {
        let (model, y) = smoke_spec_model();
        let params = SurrogateParams::default_init();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            uniform_kind(2),
            params,
            &model,
            &y,
            None,
        )
        .unwrap();
        let config = OptimizerConfig {
            iterations: 200,
            restarts: 2,
            ..OptimizerConfig::default()
        };
        let a = restore(&spec, &config).unwrap();
        let b = restore(&spec, &config).unwrap();
        assert_eq!(a.latent.values(), b.latent.values());
        // Bitwise comparison: derived float equality would treat the NaN
        // delta column of a threshold-free run as a mismatch.
        let bits = |t: &RunTrace| -> Vec<(usize, [u64; 6])> {
            t.points
                .iter()
                .map(|p| {
                    (
                        p.iter,
                        [
                            p.loss.to_bits(),
                            p.residual.to_bits(),
                            p.znorm2.to_bits(),
                            p.k.to_bits(),
                            p.delta.to_bits(),
                            p.beta2.to_bits(),
                        ],
                    )
                })
                .collect()
        };
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.image.data(), b.image.data());
    }

    #[test]
    fn trace_has_ceil_iterations_over_stride_points_and_consistent_beta() {
        let (model, y) = smoke_spec_model();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let config = OptimizerConfig {
            iterations: 250,
            trace_stride: 100,
            ..OptimizerConfig::default()
        };
        let result = restore(&spec, &config).unwrap();
        assert_eq!(result.trace.points.len(), 3); // iterations 0, 100, 200
        for p in &result.trace.points {
            assert_eq!(p.beta2, p.residual / 9.0);
            assert!(p.k.is_nan(), "identity objective has no sharpness");
            assert!(p.delta.is_nan());
        }
    }

    #[test]
    fn grid_search_oracle_is_matched_on_a_two_dim_instance() {
        let model = GeneratorModel::linear(3, 2, 2, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z_true = LatentVector::standard_normal(2, &mut rng);
        let clean = model.forward(&z_true).unwrap();
        // Pull the target slightly off the attainable set so the optimum has
        // a strictly positive residual. With an exactly attainable target the
        // log term is singular at the optimum and both search methods race
        // toward -inf, turning the comparison into a step-size measurement.
        let shifted: Vec<f64> = clean.data().iter().map(|g| 0.85 * g + 0.05).collect();
        let y = ImageTensor::new(2, 2, 1, shifted).unwrap();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();

        // Dense scan over the latent square at resolution 0.01.
        let mut grid_min = f64::INFINITY;
        for i in 0..=800 {
            for j in 0..=800 {
                let z = LatentVector::new(vec![-4.0 + i as f64 * 0.01, -4.0 + j as f64 * 0.01])
                    .unwrap();
                let loss = loss_value(&spec, &z, &spec.init_params(), FLOOR).unwrap();
                grid_min = grid_min.min(loss.total);
            }
        }

        let config = OptimizerConfig {
            iterations: 4000,
            learning_rate: 0.01,
            momentum: 0.9,
            restarts: 3,
            ..OptimizerConfig::default()
        };
        let result = restore(&spec, &config).unwrap();
        assert!(
            result.loss.total <= grid_min + 0.01 * grid_min.abs(),
            "optimizer {} vs grid {grid_min}",
            result.loss.total
        );
    }

    #[test]
    fn threshold_estimate_moves_toward_the_truth() {
        let model = GeneratorModel::mlp(17, 4, &[10], 4, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z_true = LatentVector::standard_normal(4, &mut rng);
        let truth = model.forward(&z_true).unwrap();
        let intensity = rgb_to_intensity(&truth, GrayscaleCoefficients::default()).unwrap();
        let delta_true = 0.4;
        let y = ThresholdQuantizer::new(delta_true)
            .unwrap()
            .quantize(&intensity)
            .unwrap();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            SurrogateKind::SoftThreshold,
            SurrogateParams::default_init_with_delta(),
            &model,
            &y,
            Some(GrayscaleCoefficients::default()),
        )
        .unwrap();
        let config = OptimizerConfig {
            iterations: 2000,
            learning_rate: 0.02,
            momentum: 0.9,
            ..OptimizerConfig::default()
        };
        let result = restore_with_unknown_threshold(&spec, &config).unwrap();
        let est = result.delta().unwrap();
        assert!(
            (est - delta_true).abs() < (0.5 - delta_true).abs(),
            "estimate {est} no better than the 0.5 start"
        );
        assert!(!result.trace.delta_unconstrained);
    }

    #[test]
    fn constant_observation_raises_the_unconstrained_flag() {
        let model = GeneratorModel::mlp(23, 2, &[4], 2, 2, 1).unwrap();
        let y = ImageTensor::constant(2, 2, 1, 1.0).unwrap();
        let spec = ObjectiveSpec::new(
            ObjectiveVariant::Full,
            SurrogateKind::SoftThreshold,
            SurrogateParams::default_init_with_delta(),
            &model,
            &y,
            None,
        )
        .unwrap();
        let config = OptimizerConfig {
            iterations: 50,
            ..OptimizerConfig::default()
        };
        let result = restore_with_unknown_threshold(&spec, &config).unwrap();
        assert!(result.trace.delta_unconstrained);
    }

    #[test]
    fn threshold_entry_point_rejects_other_problems() {
        let model = GeneratorModel::identity(2, 2, 1).unwrap();
        let y = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        assert!(matches!(
            restore_with_unknown_threshold(&spec, &OptimizerConfig::default()),
            Err(RestoreError::NotAThresholdProblem)
        ));
    }

    #[test]
    fn exploding_run_reports_iteration_and_partial_trace() {
        let (model, y) = smoke_spec_model();
        let spec = ObjectiveSpec::identity_fit(&model, &y, None).unwrap();
        let config = OptimizerConfig {
            iterations: 10,
            learning_rate: 1e300,
            trace_stride: 1,
            ..OptimizerConfig::default()
        };
        match restore(&spec, &config) {
            Err(RestoreError::NonFiniteLoss { iteration, trace }) => {
                assert!(iteration >= 1);
                assert_eq!(trace.points.len(), iteration);
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_round_trips_including_nan_columns() {
        let trace = RunTrace {
            points: vec![
                TracePoint {
                    iter: 0,
                    loss: -12.5,
                    residual: 0.125,
                    znorm2: 3.0,
                    k: f64::NAN,
                    delta: f64::NAN,
                    beta2: 0.125 / 9.0,
                },
                TracePoint {
                    iter: 100,
                    loss: -14.0,
                    residual: 0.061,
                    znorm2: 2.5,
                    k: 11.25,
                    delta: 0.4375,
                    beta2: 0.061 / 9.0,
                },
            ],
            delta_unconstrained: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.trace.csv");
        write_trace_csv(&trace, &path).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.points.len(), 2);
        assert!(back.points[0].k.is_nan() && back.points[0].delta.is_nan());
        assert_eq!(back.points[1], trace.points[1]);
        assert_eq!(back.points[0].loss, trace.points[0].loss);
    }

    #[test]
    fn trace_csv_reports_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "iter,loss,S,znorm2,k,delta,beta2\n0,1,2,3,4,5\n").unwrap();
        assert!(matches!(
            read_trace_csv(&path),
            Err(RestoreError::MalformedTrace { line: 2, .. })
        ));
        fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(
            read_trace_csv(&path),
            Err(RestoreError::MalformedTrace { line: 1, .. })
        ));
    }

    fn delta_trace(deltas: &[f64]) -> RunTrace {
        RunTrace {
            points: deltas
                .iter()
                .enumerate()
                .map(|(i, &delta)| TracePoint {
                    iter: i * 100,
                    loss: 0.0,
                    residual: 1.0,
                    znorm2: 0.0,
                    k: 10.0,
                    delta,
                    beta2: 0.25,
                })
                .collect(),
            delta_unconstrained: false,
        }
    }

    #[test]
    fn delta_variance_of_a_perfect_trace_is_zero() {
        let rows = delta_error_variance(&[delta_trace(&[0.4, 0.4, 0.4])], &[0.4]).unwrap();
        assert_eq!(rows, vec![(0, 0.0), (100, 0.0), (200, 0.0)]);
    }

    #[test]
    fn delta_variance_averages_squared_errors_pointwise() {
        let traces = [delta_trace(&[0.5, 0.42]), delta_trace(&[0.3, 0.41])];
        let rows = delta_error_variance(&traces, &[0.4, 0.4]).unwrap();
        // iter 0: ((0.1)^2 + (-0.1)^2) / 2 = 0.01
        assert_eq!(rows[0].0, 0);
        assert!((rows[0].1 - 0.01).abs() < 1e-15);
        // iter 100: ((0.02)^2 + (0.01)^2) / 2 = 0.00025
        assert!((rows[1].1 - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn delta_variance_validates_the_ensemble() {
        let a = delta_trace(&[0.4, 0.4]);
        let b = delta_trace(&[0.4]);
        assert!(matches!(
            delta_error_variance(&[a.clone(), b], &[0.4, 0.4]),
            Err(RestoreError::EnsembleShapeMismatch)
        ));
        assert!(matches!(
            delta_error_variance(std::slice::from_ref(&a), &[0.4, 0.4]),
            Err(RestoreError::EnsembleTruthCount {
                traces: 1,
                truths: 2
            })
        ));
        let mut nan_trace = a;
        nan_trace.points[1].delta = f64::NAN;
        assert!(matches!(
            delta_error_variance(&[nan_trace], &[0.4]),
            Err(RestoreError::MissingDeltaTrace)
        ));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = OptimizerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(OptimizerConfig {
            learning_rate: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            iterations: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig { restarts: 0, ..ok }.validate().is_err());
        assert!(OptimizerConfig {
            trace_stride: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert_eq!(OptimizerConfig::full_budget().iterations, 200_000);
        assert_eq!(OptimizerConfig::full_budget().momentum, 0.999);
    }
}
