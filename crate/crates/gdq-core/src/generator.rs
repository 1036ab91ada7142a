//! Desk-scale generative prior: a dense feed-forward network mapping a
//! latent vector to an image, with exact reverse-mode vector-Jacobian
//! products and a compact binary serialization.
//!
//! Weights and biases are stored as 32-bit floats (the serialization
//! precision); all evaluation runs in 64-bit arithmetic so that analytic
//! derivatives survive comparison against central finite differences at
//! step 1e-5. The final layer output is always clamped to `[0, 1]`, and the
//! VJP propagates through the clamp only where the pre-clamp value already
//! lies inside the interval.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::image::ImageTensor;
use crate::surrogate::sigmoid;

/// Largest weight matrix accepted from a model file, in elements.
const MAX_LAYER_ELEMENTS: u64 = 1 << 26;

const MAGIC: &[u8; 4] = b"GDQM";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("latent vector entries must be finite")]
    NonFiniteLatent,
    #[error("forward pass overflowed to a non-finite output value")]
    NonFiniteOutput,
    #[error("latent vector has {got} entries, model expects {expected}")]
    LatentDimMismatch { expected: usize, got: usize },
    #[error("upstream cotangent has {got} entries, model output has {expected}")]
    CotangentMismatch { expected: usize, got: usize },
    #[error("forward tape does not belong to this model")]
    TapeMismatch,
    #[error("model needs at least one layer")]
    EmptyModel,
    #[error("layer {layer}: rows and cols must be positive")]
    ZeroLayerDim { layer: usize },
    #[error("layer {layer}: {got} weights for a {rows}x{cols} matrix")]
    WeightCount {
        layer: usize,
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("layer {layer}: {got} biases for {rows} rows")]
    BiasCount {
        layer: usize,
        rows: usize,
        got: usize,
    },
    #[error("layer {layer}: non-finite weight, bias, or slope")]
    NonFiniteParameter { layer: usize },
    #[error("layer {layer} consumes {expected} inputs but the previous layer produces {got}")]
    ChainMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("final layer produces {produced} values but the output shape needs {expected}")]
    OutputMismatch { produced: usize, expected: usize },
    #[error("bad output shape {height}x{width}x{channels} (channels must be 1 or 3)")]
    BadOutputShape {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {0:#04x}")]
    BadVersion(u8),
    #[error("model file truncated in the header")]
    TruncatedHeader,
    #[error("model file truncated inside layer {layer}")]
    TruncatedLayer { layer: usize },
    #[error("model file truncated in the output-shape trailer")]
    TruncatedTrailer,
    #[error("model file has {0} trailing bytes after the trailer")]
    TrailingBytes(usize),
    #[error("layer {layer}: unknown activation code {code}")]
    BadActivationCode { layer: usize, code: u8 },
    #[error("layer {layer}: slope field must be zero for non-leaky activations, got {slope}")]
    BadSlopeField { layer: usize, slope: f32 },
    #[error("layer {layer}: weight matrix too large to load")]
    LayerTooLarge { layer: usize },
}

/// The generator input; each component carries a standard normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    values: Vec<f64>,
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLatent);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Draws each component from a standard normal distribution.
    pub fn standard_normal(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            values: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu { slope: f32 },
    Sigmoid,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Self::Linear => 0,
            Self::LeakyRelu { .. } => 1,
            Self::Sigmoid => 2,
        }
    }

    fn slope_field(self) -> f32 {
        match self {
            Self::LeakyRelu { slope } => slope,
            _ => 0.0,
        }
    }

    fn apply(self, pre: f64) -> f64 {
        match self {
            Self::Linear => pre,
            Self::LeakyRelu { slope } => {
                if pre >= 0.0 {
                    pre
                } else {
                    f64::from(slope) * pre
                }
            }
            Self::Sigmoid => sigmoid(pre),
        }
    }

    /// d post / d pre, given both sides of the activation.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::LeakyRelu { slope } => {
                if pre >= 0.0 {
                    1.0
                } else {
                    f64::from(slope)
                }
            }
            Self::Sigmoid => post * (1.0 - post),
        }
    }
}

/// One dense layer: `post = activation(W x + b)` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f32>,
    biases: Vec<f32>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f32>,
        biases: Vec<f32>,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        let layer = 0; // construction errors are re-indexed by the model
        if rows == 0 || cols == 0 {
            return Err(ModelError::ZeroLayerDim { layer });
        }
        if weights.len() != rows * cols {
            return Err(ModelError::WeightCount {
                layer,
                rows,
                cols,
                got: weights.len(),
            });
        }
        if biases.len() != rows {
            return Err(ModelError::BiasCount {
                layer,
                rows,
                got: biases.len(),
            });
        }
        let finite = weights.iter().chain(&biases).all(|v| v.is_finite())
            && activation.slope_field().is_finite();
        if !finite {
            return Err(ModelError::NonFiniteParameter { layer });
        }
        Ok(Self {
            rows,
            cols,
            weights,
            biases,
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = f64::from(self.biases[r]);
            for (w, xv) in row.iter().zip(x) {
                acc += f64::from(*w) * xv;
            }
            out.push(acc);
        }
        out
    }

    /// `W^T g`, the affine map's input cotangent.
    fn affine_vjp(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, gr) in g.iter().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            for (slot, w) in out.iter_mut().zip(row) {
                *slot += gr * f64::from(*w);
            }
        }
        out
    }
}

/// Intermediate activations recorded by [`GeneratorModel::forward_with_tape`]
/// so a following VJP can skip the second forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTape {
    /// Per-layer pre-activation values, in layer order. Useful for
    /// detecting evaluations near a piecewise activation kink.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// A dense feed-forward generator with a fixed output image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    layers: Vec<DenseLayer>,
    height: usize,
    width: usize,
    channels: usize,
}

impl GeneratorModel {
    pub fn new(
        layers: Vec<DenseLayer>,
        output_shape: (usize, usize, usize),
    ) -> Result<Self, ModelError> {
        let (height, width, channels) = output_shape;
        if layers.is_empty() {
            return Err(ModelError::EmptyModel);
        }
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ModelError::BadOutputShape {
                height,
                width,
                channels,
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(ModelError::ChainMismatch {
                    layer: i + 1,
                    expected: pair[1].cols,
                    got: pair[0].rows,
                });
            }
        }
        let produced = layers.last().unwrap().rows;
        let expected = height * width * channels;
        if produced != expected {
            return Err(ModelError::OutputMismatch { produced, expected });
        }
        Ok(Self {
            layers,
            height,
            width,
            channels,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn output_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn check_latent(&self, z: &LatentVector) -> Result<(), ModelError> {
        if z.dim() != self.latent_dim() {
            return Err(ModelError::LatentDimMismatch {
                expected: self.latent_dim(),
                got: z.dim(),
            });
        }
        // `LatentVector::new` validates once, but `values_mut` lets an
        // optimizer drive entries to NaN in place; re-check per pass.
        if z.values().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLatent);
        }
        Ok(())
    }

    pub fn forward(&self, z: &LatentVector) -> Result<ImageTensor, ModelError> {
        Ok(self.forward_with_tape(z)?.0)
    }

    /// Forward pass that also records every layer's pre- and
    /// post-activation values for a later [`Self::vjp_with_tape`].
    pub fn forward_with_tape(
        &self,
        z: &LatentVector,
    ) -> Result<(ImageTensor, ForwardTape), ModelError> {
        self.check_latent(z)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = z.values().to_vec();
        for layer in &self.layers {
            let p = layer.affine(&x);
            x = p.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(p);
            post.push(x.clone());
        }
        let data = x.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        // Finite inputs can still overflow an affine sum to inf - inf = NaN
        // (clamp passes NaN through), so treat that as an error, not a bug.
        let img = ImageTensor::new(self.height, self.width, self.channels, data)
            .map_err(|_| ModelError::NonFiniteOutput)?;
        Ok((img, ForwardTape { pre, post }))
    }

    /// `d <upstream, G(z)> / d z`, recomputing the forward pass.
    pub fn vjp(&self, z: &LatentVector, upstream: &[f64]) -> Result<Vec<f64>, ModelError> {
        let (_, tape) = self.forward_with_tape(z)?;
        self.vjp_with_tape(&tape, upstream)
    }

    /// `d <upstream, G(z)> / d z` from a recorded tape.
    pub fn vjp_with_tape(
        &self,
        tape: &ForwardTape,
        upstream: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        if tape.pre.len() != self.layers.len()
            || tape
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.rows)
        {
            return Err(ModelError::TapeMismatch);
        }
        if upstream.len() != self.output_len() {
            return Err(ModelError::CotangentMismatch {
                expected: self.output_len(),
                got: upstream.len(),
            });
        }
        // Clamp backward: gradient flows only where the pre-clamp value is
        // already inside [0, 1] (inclusive at the endpoints).
        let final_post = tape.post.last().expect("validated nonempty");
        let mut grad: Vec<f64> = upstream
            .iter()
            .zip(final_post)
            .map(|(u, &v)| if (0.0..=1.0).contains(&v) { *u } else { 0.0 })
            .collect();
        for (layer, (pre, post)) in self
            .layers
            .iter()
            .zip(tape.pre.iter().zip(&tape.post))
            .rev()
        {
            for ((g, &p), &q) in grad.iter_mut().zip(pre).zip(post) {
                *g *= layer.activation.derivative(p, q);
            }
            grad = layer.affine_vjp(&grad);
        }
        Ok(grad)
    }

    /// Single identity layer: the clamped latent vector reshaped to the
    /// output dimensions.
    pub fn identity(height: usize, width: usize, channels: usize) -> Result<Self, ModelError> {
        let n = height * width * channels;
        let mut weights = vec![0.0f32; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        let layer = DenseLayer::new(n, n, weights, vec![0.0; n], Activation::Linear)?;
        Self::new(vec![layer], (height, width, channels))
    }

    /// Single linear layer with seeded Gaussian weights scaled by
    /// `1/sqrt(fan_in)`. Biases sit at 0.5 so the pre-clamp output of a
    /// modest latent vector stays inside the unit interval.
    pub fn linear(
        seed: u64,
        latent_dim: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = height * width * channels;
        let layer = DenseLayer::new(
            rows,
            latent_dim,
            gaussian_weights(&mut rng, rows, latent_dim),
            vec![0.5; rows],
            Activation::Linear,
        )?;
        Self::new(vec![layer], (height, width, channels))
    }

    /// Seeded multilayer perceptron: leaky-ReLU hidden layers (slope 0.2)
    /// and a sigmoid output layer, Gaussian weights scaled by
    /// `1/sqrt(fan_in)`, zero biases.
    pub fn mlp(
        seed: u64,
        latent_dim: usize,
        hidden: &[usize],
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(height * width * channels);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (cols, rows) = (pair[0], pair[1]);
            let activation = if i + 2 == dims.len() {
                Activation::Sigmoid
            } else {
                Activation::LeakyRelu { slope: 0.2 }
            };
            layers.push(DenseLayer::new(
                rows,
                cols,
                gaussian_weights(&mut rng, rows, cols),
                vec![0.0; rows],
                activation,
            )?);
        }
        Self::new(layers, (height, width, channels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
            out.push(layer.activation.code());
            out.extend_from_slice(&layer.activation.slope_field().to_le_bytes());
            for w in &layer.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &layer.biases {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(4).ok_or(ModelError::TruncatedHeader)? != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = reader.u8().ok_or(ModelError::TruncatedHeader)?;
        if version != VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let layer_count = reader.u32().ok_or(ModelError::TruncatedHeader)? as usize;
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for layer in 0..layer_count {
            let truncated = || ModelError::TruncatedLayer { layer };
            let rows = reader.u32().ok_or_else(truncated)? as usize;
            let cols = reader.u32().ok_or_else(truncated)? as usize;
            if (rows as u64) * (cols as u64) > MAX_LAYER_ELEMENTS {
                return Err(ModelError::LayerTooLarge { layer });
            }
            let code = reader.u8().ok_or_else(truncated)?;
            let slope = reader.f32().ok_or_else(truncated)?;
            let activation = match code {
                0 | 2 => {
                    if slope != 0.0 {
                        return Err(ModelError::BadSlopeField { layer, slope });
                    }
                    if code == 0 {
                        Activation::Linear
                    } else {
                        Activation::Sigmoid
                    }
                }
                1 => Activation::LeakyRelu { slope },
                code => return Err(ModelError::BadActivationCode { layer, code }),
            };
            let weights = reader.f32s(rows * cols).ok_or_else(truncated)?;
            let biases = reader.f32s(rows).ok_or_else(truncated)?;
            layers.push(
                DenseLayer::new(rows, cols, weights, biases, activation)
                    .map_err(|e| reindex_layer_error(e, layer))?,
            );
        }
        let height = reader.u32().ok_or(ModelError::TruncatedTrailer)? as usize;
        let width = reader.u32().ok_or(ModelError::TruncatedTrailer)? as usize;
        let channels = reader.u32().ok_or(ModelError::TruncatedTrailer)? as usize;
        if reader.pos != bytes.len() {
            return Err(ModelError::TrailingBytes(bytes.len() - reader.pos));
        }
        Self::new(layers, (height, width, channels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn gaussian_weights(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f32> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

fn reindex_layer_error(err: ModelError, layer: usize) -> ModelError {
    match err {
        ModelError::ZeroLayerDim { .. } => ModelError::ZeroLayerDim { layer },
        ModelError::WeightCount {
            rows, cols, got, ..
        } => ModelError::WeightCount {
            layer,
            rows,
            cols,
            got,
        },
        ModelError::BiasCount { rows, got, .. } => ModelError::BiasCount { layer, rows, got },
        ModelError::NonFiniteParameter { .. } => ModelError::NonFiniteParameter { layer },
        other => other,
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let slice = self.take(n * 4)?;
        Some(
            slice
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two leaky-ReLU neurons feeding one sigmoid neuron, with every
    /// parameter an exact 32-bit dyadic so the arithmetic below is exact.
    fn hand_network() -> GeneratorModel {
        let l1 = DenseLayer::new(
            2,
            2,
            vec![1.0, -0.5, 0.25, 0.75],
            vec![0.125, -0.25],
            Activation::LeakyRelu { slope: 0.25 },
        )
        .unwrap();
        let l2 = DenseLayer::new(1, 2, vec![0.5, -1.0], vec![0.0625], Activation::Sigmoid).unwrap();
        GeneratorModel::new(vec![l1, l2], (1, 1, 1)).unwrap()
    }

    #[test]
    fn identity_model_reshapes_and_clamps() {
        let model = GeneratorModel::identity(2, 2, 1).unwrap();
        let z = LatentVector::new(vec![-0.5, 0.3, 1.7, 1.0]).unwrap();
        let out = model.forward(&z).unwrap();
        assert_eq!(out.data(), &[0.0, 0.3, 1.0, 1.0]);
        // In-range latent passes through untouched.
        let z = LatentVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(model.forward(&z).unwrap().data(), z.values());
    }

    #[test]
    fn zero_weights_with_bias_give_a_constant_sigmoid_image() {
        let layer =
            DenseLayer::new(4, 3, vec![0.0; 12], vec![0.25; 4], Activation::Sigmoid).unwrap();
        let model = GeneratorModel::new(vec![layer], (2, 2, 1)).unwrap();
        let out = model
            .forward(&LatentVector::new(vec![5.0, -2.0, 0.7]).unwrap())
            .unwrap();
        let want = sigmoid(0.25);
        assert!(out.data().iter().all(|&v| v == want));
    }

    #[test]
    fn hand_network_forward_matches_hand_evaluation() {
        // pre1 = (0.5 + 0.25 + 0.125, 0.125 - 0.375 - 0.25) = (0.875, -0.5)
        // post1 = (0.875, -0.125) with slope 0.25
        // pre2 = 0.4375 + 0.125 + 0.0625 = 0.625
        let model = hand_network();
        let z = LatentVector::new(vec![0.5, -0.5]).unwrap();
        let out = model.forward(&z).unwrap();
        assert_eq!(out.data()[0], sigmoid(0.625));
        assert!((out.data()[0] - 0.651_354_864_666_054_3).abs() < 1e-15);
    }

    #[test]
    fn hand_network_vjp_matches_hand_evaluation() {
        // Backward through sigmoid: g2 = s(1-s); through W2: (0.5 g2, -g2);
        // through the leaky slopes (1, 0.25): (0.5 g2, -0.25 g2);
        // through W1^T: ((0.5 - 0.0625) g2, (-0.25 - 0.1875) g2).
        let model = hand_network();
        let z = LatentVector::new(vec![0.5, -0.5]).unwrap();
        let s = sigmoid(0.625);
        let g2 = s * (1.0 - s);
        let grad = model.vjp(&z, &[1.0]).unwrap();
        assert!((grad[0] - 0.4375 * g2).abs() < 1e-16);
        assert!((grad[1] + 0.4375 * g2).abs() < 1e-16);
    }

    #[test]
    fn linear_model_vjp_is_the_transposed_weight_matrix() {
        let model = GeneratorModel::linear(11, 3, 2, 2, 1).unwrap();
        // Small latent keeps the pre-clamp output inside (0, 1), so the
        // clamp passes the cotangent through unchanged.
        let z = LatentVector::new(vec![0.05, -0.1, 0.08]).unwrap();
        let out = model.forward(&z).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let upstream = [1.0, -2.0, 0.5, 0.25];
        let grad = model.vjp(&z, &upstream).unwrap();
        let layer = &model.layers()[0];
        for (j, &g) in grad.iter().enumerate() {
            let want: f64 = (0..4)
                .map(|r| upstream[r] * f64::from(layer.weights[r * 3 + j]))
                .sum();
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn clamped_outputs_block_the_cotangent() {
        let model = GeneratorModel::identity(1, 4, 1).unwrap();
        let z = LatentVector::new(vec![-0.5, 0.3, 1.7, 1.0]).unwrap();
        let grad = model.vjp(&z, &[1.0; 4]).unwrap();
        // Saturated entries contribute nothing; the boundary value 1.0 is
        // inside the clamp interval and passes through.
        assert_eq!(grad, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = GeneratorModel::mlp(3, 4, &[6], 2, 2, 1).unwrap();
        let z = LatentVector::new(vec![0.3, -0.8, 1.1, 0.2]).unwrap();
        let grad = model.vjp(&z, &[0.0; 4]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vjp_matches_finite_differences_on_seeded_mlps() {
        let h = 1e-5;
        let mut checked = 0;
        for seed in 0..20u64 {
            let model = GeneratorModel::mlp(seed, 3, &[5, 4], 2, 2, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let z = LatentVector::standard_normal(3, &mut rng);
            // Keep a margin from the activation kinks and the clamp so the
            // finite-difference stencil stays on one smooth branch.
            let (_, tape) = model.forward_with_tape(&z).unwrap();
            let near_kink = tape.pre.iter().flatten().any(|&p| p.abs() < 1e-3)
                || tape
                    .post
                    .last()
                    .unwrap()
                    .iter()
                    .any(|&v| !(1e-3..=1.0 - 1e-3).contains(&v));
            if near_kink {
                continue;
            }
            let upstream: Vec<f64> = (0..4).map(|i| 0.5 - 0.3 * i as f64).collect();
            let grad = model.vjp(&z, &upstream).unwrap();
            for (j, &analytic) in grad.iter().enumerate() {
                let probe = |offset: f64| {
                    let mut zz = z.clone();
                    zz.values_mut()[j] += offset;
                    let out = model.forward(&zz).unwrap();
                    out.data()
                        .iter()
                        .zip(&upstream)
                        .map(|(o, u)| o * u)
                        .sum::<f64>()
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let rel = (analytic - fd).abs() / (analytic.abs().max(fd.abs()) + 1e-8);
                assert!(rel < 1e-4, "seed {seed} component {j}: {analytic} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 30, "too many seeds were skipped: {checked}");
    }

    #[test]
    fn toy_builders_are_deterministic_per_seed() {
        assert_eq!(
            GeneratorModel::mlp(9, 4, &[7], 3, 3, 1).unwrap(),
            GeneratorModel::mlp(9, 4, &[7], 3, 3, 1).unwrap()
        );
        assert_ne!(
            GeneratorModel::mlp(9, 4, &[7], 3, 3, 1).unwrap(),
            GeneratorModel::mlp(10, 4, &[7], 3, 3, 1).unwrap()
        );
    }

    #[test]
    fn forward_validates_latent_dimension() {
        let model = GeneratorModel::mlp(0, 4, &[5], 2, 2, 1).unwrap();
        let err = model.forward(&LatentVector::zeros(3)).unwrap_err();
        assert!(matches!(
            err,
            ModelError::LatentDimMismatch {
                expected: 4,
                got: 3
            }
        ));
        let err = model.vjp(&LatentVector::zeros(4), &[1.0; 3]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::CotangentMismatch {
                expected: 4,
                got: 3
            }
        ));
    }

    #[test]
    fn serialization_round_trip_is_byte_identical() {
        let model = GeneratorModel::mlp(21, 5, &[8, 6], 2, 3, 3).unwrap();
        let bytes = model.to_bytes();
        let back = GeneratorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gdqm");
        model.save(&path).unwrap();
        assert_eq!(GeneratorModel::load(&path).unwrap(), model);
    }

    #[test]
    fn loader_rejects_bad_magic_and_version() {
        let mut bytes = GeneratorModel::identity(1, 1, 1).unwrap().to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            GeneratorModel::from_bytes(&wrong),
            Err(ModelError::BadMagic)
        ));
        bytes[4] = 0x02;
        assert!(matches!(
            GeneratorModel::from_bytes(&bytes),
            Err(ModelError::BadVersion(0x02))
        ));
    }

    #[test]
    fn loader_names_the_truncated_layer() {
        let model = GeneratorModel::mlp(2, 3, &[4], 2, 2, 1).unwrap();
        let bytes = model.to_bytes();
        // Header is 9 bytes; layer 0 occupies 9 + 4*(3*4 + 4) = 73 bytes.
        // Cutting after that lands inside layer 1.
        let cut = 9 + 9 + 4 * (3 * 4 + 4) + 5;
        match GeneratorModel::from_bytes(&bytes[..cut]) {
            Err(ModelError::TruncatedLayer { layer: 1 }) => {}
            other => panic!("expected layer-1 truncation, got {other:?}"),
        }
        match GeneratorModel::from_bytes(&bytes[..3]) {
            Err(ModelError::TruncatedHeader) => {}
            other => panic!("expected header truncation, got {other:?}"),
        }
        match GeneratorModel::from_bytes(&bytes[..bytes.len() - 2]) {
            Err(ModelError::TruncatedTrailer) => {}
            other => panic!("expected trailer truncation, got {other:?}"),
        }
    }

    #[test]
    fn loader_rejects_trailing_bytes_and_bad_codes() {
        let model = GeneratorModel::identity(1, 2, 1).unwrap();
        let mut padded = model.to_bytes();
        padded.push(0);
        assert!(matches!(
            GeneratorModel::from_bytes(&padded),
            Err(ModelError::TrailingBytes(1))
        ));

        let mut bad_code = model.to_bytes();
        bad_code[9 + 8] = 7; // activation code of layer 0
        assert!(matches!(
            GeneratorModel::from_bytes(&bad_code),
            Err(ModelError::BadActivationCode { layer: 0, code: 7 })
        ));

        let mut bad_slope = model.to_bytes();
        bad_slope[9 + 9..9 + 13].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(matches!(
            GeneratorModel::from_bytes(&bad_slope),
            Err(ModelError::BadSlopeField { layer: 0, .. })
        ));
    }

    #[test]
    fn model_construction_enforces_the_dimension_chain() {
        let l1 = DenseLayer::new(3, 2, vec![0.0; 6], vec![0.0; 3], Activation::Linear).unwrap();
        let l2 = DenseLayer::new(2, 4, vec![0.0; 8], vec![0.0; 2], Activation::Linear).unwrap();
        assert!(matches!(
            GeneratorModel::new(vec![l1.clone(), l2], (1, 2, 1)),
            Err(ModelError::ChainMismatch {
                layer: 1,
                expected: 4,
                got: 3
            })
        ));
        assert!(matches!(
            GeneratorModel::new(vec![l1], (2, 2, 1)),
            Err(ModelError::OutputMismatch {
                produced: 3,
                expected: 4
            })
        ));
        assert!(matches!(
            GeneratorModel::new(vec![], (1, 1, 1)),
            Err(ModelError::EmptyModel)
        ));
    }

    #[test]
    fn layer_construction_validates_shapes_and_values() {
        assert!(matches!(
            DenseLayer::new(2, 2, vec![0.0; 3], vec![0.0; 2], Activation::Linear),
            Err(ModelError::WeightCount { .. })
        ));
        assert!(matches!(
            DenseLayer::new(2, 2, vec![0.0; 4], vec![0.0; 3], Activation::Linear),
            Err(ModelError::BiasCount { .. })
        ));
        assert!(matches!(
            DenseLayer::new(
                2,
                2,
                vec![0.0, f32::NAN, 0.0, 0.0],
                vec![0.0; 2],
                Activation::Linear
            ),
            Err(ModelError::NonFiniteParameter { .. })
        ));
        assert!(LatentVector::new(vec![0.0, f64::INFINITY]).is_err());
    }
}
