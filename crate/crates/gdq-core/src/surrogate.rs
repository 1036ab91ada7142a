//! Differentiable stand-ins for the hard quantizers.
//!
//! Each surrogate replaces a hard assignment with a softmax (or sigmoid)
//! weighting controlled by a sharpness parameter `k > 0`, and reports exact
//! analytic partial derivatives with respect to its input and parameters.
//! The optimizer works on unconstrained raw variables: `kappa = ln k` and,
//! for the threshold surrogate, `delta_raw = logit(delta)`, so all
//! parameter derivatives here are taken with respect to those raw values.
//!
//! Softmax weights are evaluated with the maximum exponent subtracted, so
//! arbitrarily large sharpness degrades gracefully (weights underflow to
//! one-hot) instead of overflowing. At extreme sharpness the sigmoid
//! saturates to exactly 0 or 1 in floating point; the open-interval range
//! statements below hold for moderate `k`.

use thiserror::Error;

use crate::image::ImageTensor;
use crate::quantize::{PaletteQuantizer, UniformQuantizer};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("sharpness {0} must be positive and finite")]
    BadSharpness(f64),
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    BadDelta(f64),
    #[error("this surrogate requires a threshold parameter, but none is set")]
    MissingDelta,
    #[error("{kind} expects a {expected}-channel image, got {actual} channels")]
    ChannelMismatch {
        kind: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("upstream cotangent has {actual} elements, expected {expected}")]
    CotangentMismatch { expected: usize, actual: usize },
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sharpness and threshold in their raw (unconstrained) parameterization,
/// plus per-parameter trainability flags consumed by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParams {
    kappa: f64,
    delta_raw: Option<f64>,
    train_k: bool,
    train_delta: bool,
}

impl SurrogateParams {
    /// Default starting point: `k = 10` and no threshold. A moderately
    /// smooth surrogate avoids the vanishing-gradient plateau that a very
    /// sharp one would start in.
    pub fn default_init() -> Self {
        Self {
            kappa: 10.0f64.ln(),
            delta_raw: None,
            train_k: true,
            train_delta: false,
        }
    }

    /// Default starting point with a threshold at `delta = 0.5`.
    pub fn default_init_with_delta() -> Self {
        Self {
            delta_raw: Some(0.0),
            train_delta: true,
            ..Self::default_init()
        }
    }

    pub fn with_k(k: f64) -> Result<Self, SurrogateError> {
        if !k.is_finite() || k <= 0.0 {
            return Err(SurrogateError::BadSharpness(k));
        }
        Ok(Self {
            kappa: k.ln(),
            ..Self::default_init()
        })
    }

    pub fn with_k_delta(k: f64, delta: f64) -> Result<Self, SurrogateError> {
        if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
            return Err(SurrogateError::BadDelta(delta));
        }
        Ok(Self {
            delta_raw: Some((delta / (1.0 - delta)).ln()),
            train_delta: true,
            ..Self::with_k(k)?
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn k(&self) -> f64 {
        self.kappa.exp()
    }

    pub fn delta_raw(&self) -> Option<f64> {
        self.delta_raw
    }

    pub fn delta(&self) -> Option<f64> {
        self.delta_raw.map(sigmoid)
    }

    pub fn train_k(&self) -> bool {
        self.train_k
    }

    pub fn train_delta(&self) -> bool {
        self.train_delta && self.delta_raw.is_some()
    }

    pub fn set_train_k(&mut self, train: bool) {
        self.train_k = train;
    }

    pub fn set_train_delta(&mut self, train: bool) {
        self.train_delta = train;
    }

    pub fn set_kappa(&mut self, kappa: f64) {
        self.kappa = kappa;
    }

    /// No-op when the parameter set has no threshold.
    pub fn set_delta_raw(&mut self, delta_raw: f64) {
        if self.delta_raw.is_some() {
            self.delta_raw = Some(delta_raw);
        }
    }
}

/// Which relaxation to apply.
#[derive(Debug, Clone)]
pub enum SurrogateKind {
    SoftUniform(UniformQuantizer),
    SoftPalette(PaletteQuantizer),
    SoftThreshold,
    /// No transform at all; the objective fits the generator output
    /// directly to the observation.
    Identity,
}

impl SurrogateKind {
    /// Channel count the input tensor must have, if constrained.
    pub fn required_channels(&self) -> Option<usize> {
        match self {
            Self::SoftPalette(_) => Some(3),
            Self::SoftThreshold => Some(1),
            Self::SoftUniform(_) | Self::Identity => None,
        }
    }

    pub fn needs_delta(&self) -> bool {
        matches!(self, Self::SoftThreshold)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SoftUniform(_) => "soft-uniform",
            Self::SoftPalette(_) => "soft-palette",
            Self::SoftThreshold => "soft-threshold",
            Self::Identity => "identity",
        }
    }
}

/// Softmax weights over `exp(-k * d_i)` with the max exponent subtracted.
/// `d_i >= 0` are squared distances; entries at the minimum distance get
/// exponent exactly zero, so the weights stay finite for any `k`.
fn softmax_weights(k: f64, distances: &[f64]) -> Vec<f64> {
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = distances
        .iter()
        .map(|&d| {
            let t = d - d_min;
            if t == 0.0 {
                1.0
            } else {
                (-k * t).exp()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftUniformEval {
    pub value: f64,
    pub d_input: f64,
    pub d_kappa: f64,
}

/// Smooth uniform quantizer: the softmax-weighted mean of the level
/// centers, with weights `exp(-k (r - c_i)^2)`.
///
/// Writing `E[.]` for the weighted mean, the derivatives reduce to
/// covariance forms: `d/dr = 2k Var(c)` (hence the map is nondecreasing in
/// `r` for every `k > 0`) and `d/dkappa = -k Cov(c, (r - c)^2)`.
pub fn soft_uniform(r: f64, quantizer: &UniformQuantizer, k: f64) -> SoftUniformEval {
    let centers = quantizer.centers();
    let distances: Vec<f64> = centers.iter().map(|&c| (r - c).powi(2)).collect();
    let weights = softmax_weights(k, &distances);

    let mean: f64 = weights.iter().zip(&centers).map(|(w, c)| w * c).sum();
    let mean_dist: f64 = weights.iter().zip(&distances).map(|(w, d)| w * d).sum();
    // Centered moments: the uncentered `E[c^2] - E[c]^2` form loses to
    // cancellation once the weights concentrate on one center (variance
    // ~1e-18 against an ulp of ~1e-17) and can turn negative, breaking the
    // guaranteed monotonicity of the map. Summing squared deviations keeps
    // the variance nonnegative by construction.
    let variance: f64 = weights
        .iter()
        .zip(&centers)
        .map(|(w, c)| w * (c - mean).powi(2))
        .sum();
    let covariance: f64 = weights
        .iter()
        .zip(&centers)
        .zip(&distances)
        .map(|((w, c), d)| w * (c - mean) * (d - mean_dist))
        .sum();
    SoftUniformEval {
        value: mean,
        d_input: 2.0 * k * variance,
        d_kappa: -k * covariance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftPaletteEval {
    pub value: [f64; 3],
    /// `jacobian[a][b] = d value_a / d x_b`; equals `2k Cov(q, q)`, so it
    /// is symmetric positive semidefinite.
    pub jacobian: [[f64; 3]; 3],
    pub d_kappa: [f64; 3],
}

/// Smooth palette quantizer: the softmax-weighted mean of the palette
/// colors, with weights `exp(-k ||x - q_i||^2)`.
pub fn soft_palette(x: [f64; 3], palette: &PaletteQuantizer, k: f64) -> SoftPaletteEval {
    let colors = palette.colors();
    let distances: Vec<f64> = colors
        .iter()
        .map(|q| (x[0] - q[0]).powi(2) + (x[1] - q[1]).powi(2) + (x[2] - q[2]).powi(2))
        .collect();
    let weights = softmax_weights(k, &distances);

    let mut value = [0.0; 3];
    let mut mean_dist = 0.0;
    for ((w, q), d) in weights.iter().zip(colors).zip(&distances) {
        mean_dist += w * d;
        for a in 0..3 {
            value[a] += w * q[a];
        }
    }

    // Centered moments, for the same cancellation reason as in
    // [`soft_uniform`]: the summed outer products of deviations keep the
    // jacobian's diagonal nonnegative and the matrix exactly symmetric
    // (`dev[a] * dev[b]` commutes before the scale factor is applied).
    let mut jacobian = [[0.0; 3]; 3];
    let mut d_kappa = [0.0; 3];
    for ((w, q), d) in weights.iter().zip(colors).zip(&distances) {
        let dev = [q[0] - value[0], q[1] - value[1], q[2] - value[2]];
        let scale = 2.0 * k * w;
        for a in 0..3 {
            d_kappa[a] -= k * w * dev[a] * (d - mean_dist);
            for b in 0..3 {
                jacobian[a][b] += scale * (dev[a] * dev[b]);
            }
        }
    }
    SoftPaletteEval {
        value,
        jacobian,
        d_kappa,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftThresholdEval {
    pub value: f64,
    pub d_input: f64,
    pub d_kappa: f64,
    pub d_delta_raw: f64,
}

/// Smooth binarization: a logistic ramp `sigmoid(k (intensity - delta))`
/// centered on the threshold.
pub fn soft_threshold(intensity: f64, k: f64, delta: f64) -> SoftThresholdEval {
    let value = sigmoid(k * (intensity - delta));
    let slope = value * (1.0 - value);
    SoftThresholdEval {
        value,
        d_input: k * slope,
        d_kappa: k * (intensity - delta) * slope,
        d_delta_raw: -k * slope * delta * (1.0 - delta),
    }
}

/// Recorded derivatives of one [`apply_surrogate`] call, consumed via the
/// vector-Jacobian products on [`SurrogateOutput`].
#[derive(Debug, Clone)]
enum GradCtx {
    Identity,
    Elementwise {
        d_input: Vec<f64>,
        d_kappa: Vec<f64>,
        d_delta_raw: Option<Vec<f64>>,
    },
    PerPixel {
        jacobians: Vec<[[f64; 3]; 3]>,
        d_kappa: Vec<[f64; 3]>,
    },
}

/// A transformed tensor together with everything needed to backpropagate
/// through the transform.
#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    output: ImageTensor,
    grad: GradCtx,
}

impl SurrogateOutput {
    pub fn output(&self) -> &ImageTensor {
        &self.output
    }

    fn check_cotangent(&self, upstream: &[f64]) -> Result<(), SurrogateError> {
        if upstream.len() != self.output.len() {
            return Err(SurrogateError::CotangentMismatch {
                expected: self.output.len(),
                actual: upstream.len(),
            });
        }
        Ok(())
    }

    /// `upstream^T * d output / d input`, shaped like the input tensor.
    pub fn vjp_input(&self, upstream: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        self.check_cotangent(upstream)?;
        Ok(match &self.grad {
            GradCtx::Identity => upstream.to_vec(),
            GradCtx::Elementwise { d_input, .. } => {
                upstream.iter().zip(d_input).map(|(u, d)| u * d).collect()
            }
            GradCtx::PerPixel { jacobians, .. } => {
                let mut grad = Vec::with_capacity(upstream.len());
                for (jac, u) in jacobians.iter().zip(upstream.chunks_exact(3)) {
                    grad.extend((0..3).map(|b| (0..3).map(|a| u[a] * jac[a][b]).sum::<f64>()));
                }
                grad
            }
        })
    }

    /// `upstream^T * d output / d kappa` (scalar: sharpness is global).
    pub fn vjp_kappa(&self, upstream: &[f64]) -> Result<f64, SurrogateError> {
        self.check_cotangent(upstream)?;
        Ok(match &self.grad {
            GradCtx::Identity => 0.0,
            GradCtx::Elementwise { d_kappa, .. } => {
                upstream.iter().zip(d_kappa).map(|(u, d)| u * d).sum()
            }
            GradCtx::PerPixel { d_kappa, .. } => d_kappa
                .iter()
                .zip(upstream.chunks_exact(3))
                .map(|(d, u)| u[0] * d[0] + u[1] * d[1] + u[2] * d[2])
                .sum(),
        })
    }

    /// `upstream^T * d output / d delta_raw`; zero for kinds without a
    /// threshold.
    pub fn vjp_delta_raw(&self, upstream: &[f64]) -> Result<f64, SurrogateError> {
        self.check_cotangent(upstream)?;
        Ok(match &self.grad {
            GradCtx::Elementwise {
                d_delta_raw: Some(d),
                ..
            } => upstream.iter().zip(d).map(|(u, dd)| u * dd).sum(),
            _ => 0.0,
        })
    }
}

/// Applies a surrogate over a whole tensor, capturing the derivatives.
pub fn apply_surrogate(
    input: &ImageTensor,
    kind: &SurrogateKind,
    params: &SurrogateParams,
) -> Result<SurrogateOutput, SurrogateError> {
    if let Some(expected) = kind.required_channels() {
        if input.channels() != expected {
            return Err(SurrogateError::ChannelMismatch {
                kind: kind.name(),
                expected,
                actual: input.channels(),
            });
        }
    }
    let k = params.k();
    // `k = exp(kappa)` overflows to inf once kappa passes ~709.8; the
    // softmax weights then evaluate to NaN, so refuse up front. Underflow
    // to `k = 0` is benign (a maximally flat surrogate).
    if !matches!(kind, SurrogateKind::Identity) && !k.is_finite() {
        return Err(SurrogateError::BadSharpness(k));
    }
    let (height, width, channels) = input.shape();
    let output_image = |data: Vec<f64>| {
        // Convex combinations of in-range values can leave [0, 1] by an
        // ulp under rounding, so saturate instead of rejecting.
        ImageTensor::from_clamped(height, width, channels, data)
            .expect("finite sharpness keeps surrogate outputs finite")
    };

    Ok(match kind {
        SurrogateKind::Identity => SurrogateOutput {
            output: input.clone(),
            grad: GradCtx::Identity,
        },
        SurrogateKind::SoftUniform(quantizer) => {
            let mut data = Vec::with_capacity(input.len());
            let mut d_input = Vec::with_capacity(input.len());
            let mut d_kappa = Vec::with_capacity(input.len());
            for &r in input.data() {
                let eval = soft_uniform(r, quantizer, k);
                data.push(eval.value);
                d_input.push(eval.d_input);
                d_kappa.push(eval.d_kappa);
            }
            SurrogateOutput {
                output: output_image(data),
                grad: GradCtx::Elementwise {
                    d_input,
                    d_kappa,
                    d_delta_raw: None,
                },
            }
        }
        SurrogateKind::SoftPalette(palette) => {
            let mut data = Vec::with_capacity(input.len());
            let mut jacobians = Vec::with_capacity(input.pixel_count());
            let mut d_kappa = Vec::with_capacity(input.pixel_count());
            for pixel in input.pixels() {
                let eval = soft_palette([pixel[0], pixel[1], pixel[2]], palette, k);
                data.extend_from_slice(&eval.value);
                jacobians.push(eval.jacobian);
                d_kappa.push(eval.d_kappa);
            }
            SurrogateOutput {
                output: output_image(data),
                grad: GradCtx::PerPixel { jacobians, d_kappa },
            }
        }
        SurrogateKind::SoftThreshold => {
            let delta = params.delta().ok_or(SurrogateError::MissingDelta)?;
            if delta.is_nan() {
                return Err(SurrogateError::BadDelta(delta));
            }
            let mut data = Vec::with_capacity(input.len());
            let mut d_input = Vec::with_capacity(input.len());
            let mut d_kappa = Vec::with_capacity(input.len());
            let mut d_delta_raw = Vec::with_capacity(input.len());
            for &v in input.data() {
                let eval = soft_threshold(v, k, delta);
                data.push(eval.value);
                d_input.push(eval.d_input);
                d_kappa.push(eval.d_kappa);
                d_delta_raw.push(eval.d_delta_raw);
            }
            SurrogateOutput {
                output: output_image(data),
                grad: GradCtx::Elementwise {
                    d_input,
                    d_kappa,
                    d_delta_raw: Some(d_delta_raw),
                },
            }
        }
    })
}

/// Samples `(k, r, value)` rows of the smooth uniform quantizer response
/// for plotting, one row per grid point per sharpness value.
pub fn soft_uniform_curve_csv(quantizer: &UniformQuantizer, ks: &[f64], samples: usize) -> String {
    let mut csv = String::from("k,r,value\n");
    for &k in ks {
        for i in 0..samples {
            let r = i as f64 / (samples.max(2) - 1) as f64;
            let value = soft_uniform(r, quantizer, k).value;
            csv.push_str(&format!("{k},{r},{value}\n"));
        }
    }
    csv
}
