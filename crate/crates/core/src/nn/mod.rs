//! From-scratch feed-forward classifier with batch normalization.
//!
//! The model is a stack of [`LayerBlock`]s, each `linear -> batch norm ->
//! activation`. Batch normalization can run off frozen running statistics
//! ([`StatsMode::SourceStats`]) or off the current batch's statistics
//! ([`StatsMode::TestBatchStats`]); in the latter mode the statistics are
//! treated as differentiable functions of the input, matching training-mode
//! BN semantics.
//!
//! Parameter flattening order is canonical across the crate: layers in
//! index order; within a layer, `AllParams` is weight (row-major), bias,
//! gamma, beta and `AffineOnly` is gamma, beta. Per-sample gradient vectors,
//! optimizer state, and checkpoint files all follow this order.

mod autodiff;
mod checkpoint;

pub use autodiff::{backward, entropy, entropy_unchecked, forward, per_sample_gradients, softmax};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::linalg::Mat;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Log arguments are clamped at this floor so `0 * log 0` stays `0`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Errors from model construction, inference, and gradient computation.
#[derive(Clone, Debug, PartialEq)]
pub enum NnError {
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Batch statistics need at least two samples.
    BatchTooSmall { n: usize },
    NonFinite { context: &'static str },
    /// A probability vector failed validation.
    InvalidProbability { context: String },
    /// A trace does not belong to the given model/batch.
    TraceMismatch { context: &'static str },
    InvalidParameter { context: String },
    Checkpoint { context: String },
    Io { context: String },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::DimensionMismatch { context, expected, got } => {
                write!(f, "dimension mismatch in {context}: expected {expected}, got {got}")
            }
            NnError::BatchTooSmall { n } => {
                write!(f, "batch statistics require n >= 2 samples, got {n}")
            }
            NnError::NonFinite { context } => write!(f, "non-finite values in {context}"),
            NnError::InvalidProbability { context } => {
                write!(f, "invalid probability vector: {context}")
            }
            NnError::TraceMismatch { context } => {
                write!(f, "forward trace does not match model: {context}")
            }
            NnError::InvalidParameter { context } => write!(f, "invalid parameter: {context}"),
            NnError::Checkpoint { context } => write!(f, "checkpoint error: {context}"),
            NnError::Io { context } => write!(f, "i/o error: {context}"),
        }
    }
}

impl std::error::Error for NnError {}

/// Per-layer activation. The final layer is `Identity` so the model emits
/// raw logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Which statistics batch normalization uses in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// Frozen running statistics accumulated during source pretraining.
    SourceStats,
    /// Statistics of the current batch; running statistics stay untouched.
    TestBatchStats,
}

/// Which parameters an optimizer step (and gradient computation) touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamScope {
    /// Batch-norm gamma/beta only.
    AffineOnly,
    /// Weights, biases, gamma, beta.
    AllParams,
}

/// Batch normalization state for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub stats_mode: StatsMode,
}

impl BatchNormState {
    pub fn identity(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-5,
            stats_mode: StatsMode::SourceStats,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, out_dim: usize) -> Result<(), NnError> {
        for (name, v) in [
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            if v.len() != out_dim {
                return Err(NnError::DimensionMismatch {
                    context: "batch norm vector length",
                    expected: out_dim,
                    got: v.len(),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(NnError::NonFinite { context: "batch norm state" });
            }
            if name == "running_var" && v.iter().any(|&x| x <= 0.0) {
                return Err(NnError::InvalidParameter {
                    context: "running_var entries must be strictly positive".into(),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(NnError::InvalidParameter {
                context: format!("eps must be positive, got {}", self.eps),
            });
        }
        Ok(())
    }
}

/// One `linear -> batch norm -> activation` block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    /// `out_dim x in_dim`.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub bn: BatchNormState,
    pub activation: Activation,
}

impl LayerBlock {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward classifier over `num_classes` classes.
///
/// Layer dimensions chain (output of layer k feeds layer k+1) and the final
/// layer emits `num_classes` logits; both are enforced at construction and
/// checkpoint load.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallClassifier {
    layers: Vec<LayerBlock>,
    input_dim: usize,
    num_classes: usize,
}

impl SmallClassifier {
    pub fn new(layers: Vec<LayerBlock>, input_dim: usize, num_classes: usize) -> Result<Self, NnError> {
        if num_classes < 2 {
            return Err(NnError::InvalidParameter {
                context: format!("num_classes must be >= 2, got {num_classes}"),
            });
        }
        if layers.is_empty() {
            return Err(NnError::InvalidParameter { context: "model needs at least one layer".into() });
        }
        let mut expected_in = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != expected_in {
                return Err(NnError::DimensionMismatch {
                    context: "layer input dimension",
                    expected: expected_in,
                    got: layer.in_dim(),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::DimensionMismatch {
                    context: "bias length",
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
            if !layer.weight.is_finite() || !layer.bias.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { context: "layer parameters" });
            }
            layer.bn.validate(layer.out_dim())?;
            let _ = i;
            expected_in = layer.out_dim();
        }
        if expected_in != num_classes {
            return Err(NnError::DimensionMismatch {
                context: "final layer output",
                expected: num_classes,
                got: expected_in,
            });
        }
        Ok(SmallClassifier { layers, input_dim, num_classes })
    }

    /// Random MLP `input_dim -> hidden... -> num_classes` with ReLU hidden
    /// activations, identity output, and identity-initialized batch norm.
    /// Weights are He-initialized from the given seed.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut w = Mat::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * scale;
            }
            let activation = if k + 1 == dims.len() - 1 { Activation::Identity } else { Activation::Relu };
            layers.push(LayerBlock {
                weight: w,
                bias: vec![0.0; fan_out],
                bn: BatchNormState::identity(fan_out),
                activation,
            });
        }
        SmallClassifier::new(layers, input_dim, num_classes)
    }

    pub fn layers(&self) -> &[LayerBlock] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [LayerBlock] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Sets the statistics mode of every batch-norm layer.
    pub fn set_stats_mode(&mut self, mode: StatsMode) {
        for layer in &mut self.layers {
            layer.bn.stats_mode = mode;
        }
    }

    pub fn any_test_batch_stats(&self) -> bool {
        self.layers.iter().any(|l| l.bn.stats_mode == StatsMode::TestBatchStats)
    }

    /// Number of parameters covered by `scope`.
    pub fn param_count(&self, scope: ParamScope) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let affine = 2 * l.out_dim();
                match scope {
                    ParamScope::AffineOnly => affine,
                    ParamScope::AllParams => l.out_dim() * l.in_dim() + l.out_dim() + affine,
                }
            })
            .sum()
    }

    /// Flattens the parameters in `scope` in canonical order.
    pub fn flatten_scope(&self, scope: ParamScope) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count(scope));
        for layer in &self.layers {
            if scope == ParamScope::AllParams {
                out.extend_from_slice(layer.weight.data());
                out.extend_from_slice(&layer.bias);
            }
            out.extend_from_slice(&layer.bn.gamma);
            out.extend_from_slice(&layer.bn.beta);
        }
        out
    }

    /// Writes a canonical-order flat vector back into the parameters in
    /// `scope`. Rejects length mismatches and non-finite values.
    pub fn assign_scope(&mut self, scope: ParamScope, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count(scope) {
            return Err(NnError::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.param_count(scope),
                got: flat.len(),
            });
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite { context: "flat parameter vector" });
        }
        let mut pos = 0usize;
        for layer in &mut self.layers {
            if scope == ParamScope::AllParams {
                let wlen = layer.weight.data().len();
                layer.weight.data_mut().copy_from_slice(&flat[pos..pos + wlen]);
                pos += wlen;
                let blen = layer.bias.len();
                layer.bias.copy_from_slice(&flat[pos..pos + blen]);
                pos += blen;
            }
            let glen = layer.bn.gamma.len();
            layer.bn.gamma.copy_from_slice(&flat[pos..pos + glen]);
            pos += glen;
            let blen = layer.bn.beta.len();
            layer.bn.beta.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }

    /// Updates running statistics from a trace's batch statistics with the
    /// standard exponential moving average (`new = (1-m)*old + m*batch`).
    /// The variance update uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace, momentum: f64) -> Result<(), NnError> {
        if trace.layers.len() != self.layers.len() {
            return Err(NnError::TraceMismatch { context: "layer count" });
        }
        let n = trace.batch_size as f64;
        if trace.batch_size < 2 {
            return Err(NnError::BatchTooSmall { n: trace.batch_size });
        }
        let unbias = n / (n - 1.0);
        for (layer, lt) in self.layers.iter_mut().zip(&trace.layers) {
            if lt.mean.len() != layer.out_dim() {
                return Err(NnError::TraceMismatch { context: "statistics dimension" });
            }
            for k in 0..layer.out_dim() {
                layer.bn.running_mean[k] =
                    (1.0 - momentum) * layer.bn.running_mean[k] + momentum * lt.mean[k];
                layer.bn.running_var[k] =
                    (1.0 - momentum) * layer.bn.running_var[k] + momentum * lt.var[k] * unbias;
            }
        }
        Ok(())
    }
}

/// Cached per-layer values from one forward pass, sufficient for an exact
/// reverse pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Input to the layer (`n x in_dim`).
    pub input: Mat,
    /// Linear output before normalization (`n x out_dim`).
    pub pre_bn: Mat,
    /// Mean used for normalization (batch or running, per stats mode).
    pub mean: Vec<f64>,
    /// Variance used for normalization (biased batch variance in
    /// `TestBatchStats` mode).
    pub var: Vec<f64>,
    /// Normalized values before the affine transform.
    pub normalized: Mat,
    /// After gamma/beta, before the activation.
    pub pre_act: Mat,
    /// Layer output.
    pub output: Mat,
}

/// Forward-pass cache for one batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub batch_size: usize,
}

/// Gradients for the parameters in one scope, mirroring the model layout.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub scope: ParamScope,
    pub layers: Vec<LayerGrads>,
}

/// Per-layer gradient block; weight/bias are absent under `AffineOnly`.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Option<Mat>,
    pub bias: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GradientSet {
    /// Flattens in the same canonical order as
    /// [`SmallClassifier::flatten_scope`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some(w) = &layer.weight {
                out.extend_from_slice(w.data());
            }
            if let Some(b) = &layer.bias {
                out.extend_from_slice(b);
            }
            out.extend_from_slice(&layer.gamma);
            out.extend_from_slice(&layer.beta);
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}
