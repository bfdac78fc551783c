//! The test-time adaptation loop.
//!
//! A [`ModelPair`] holds the frozen original model and the mutable adapted
//! model, both normalizing with test-batch statistics. Each step runs both
//! models on the incoming batch, selects samples by the configured
//! [`SelectionStrategy`], takes one optimizer step of the configured
//! objective on the adapted model, and records everything in a
//! [`StepRecord`].

mod runlog;

pub use runlog::{RunLog, SampleRecord, SkippedBatch, StepRecord, RUNLOG_VERSION};

use crate::linalg::{l2_norm, Mat};
use crate::nn::{
    self, entropy_unchecked, ForwardTrace, GradientSet, NnError, ParamScope, SmallClassifier,
    StatsMode, LOG_FLOOR,
};
use crate::streams::LabeledBatch;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from adaptation steps and scenario execution.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptError {
    Nn(NnError),
    InvalidConfig { context: String },
    /// The loss went non-finite; the adapted model is left unchanged.
    NonFiniteLoss { step: usize },
    BatchMismatch { context: String },
}

impl fmt::Display for AdaptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdaptError::Nn(e) => write!(f, "model error: {e}"),
            AdaptError::InvalidConfig { context } => write!(f, "invalid adaptation config: {context}"),
            AdaptError::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}; adapted model left unchanged")
            }
            AdaptError::BatchMismatch { context } => write!(f, "batch mismatch: {context}"),
        }
    }
}

impl std::error::Error for AdaptError {}

impl From<NnError> for AdaptError {
    fn from(e: NnError) -> Self {
        AdaptError::Nn(e)
    }
}

/// The frozen original model and the adapted model it seeds.
///
/// Construction switches both to test-batch statistics so the confidence
/// difference isolates the effect of adapted parameters rather than of a
/// statistics-mode mismatch. The original model is never mutated afterwards.
#[derive(Clone, Debug)]
pub struct ModelPair {
    theta_o: SmallClassifier,
    theta_a: SmallClassifier,
}

impl ModelPair {
    pub fn new(pretrained: SmallClassifier) -> Self {
        let mut theta_o = pretrained;
        theta_o.set_stats_mode(StatsMode::TestBatchStats);
        let theta_a = theta_o.clone();
        ModelPair { theta_o, theta_a }
    }

    pub fn theta_o(&self) -> &SmallClassifier {
        &self.theta_o
    }

    pub fn theta_a(&self) -> &SmallClassifier {
        &self.theta_a
    }
}

/// Which score the confidence-difference criterion compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSpace {
    Softmax,
    Logit,
}

fn default_margin() -> f64 {
    0.0
}

fn default_score_space() -> ScoreSpace {
    ScoreSpace::Softmax
}

/// How the step picks the samples whose entropy it minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// No filtering.
    All,
    /// Keep samples whose adapted-model max probability reaches `p`.
    ConfidenceThreshold { p: f64 },
    /// Keep samples whose adapted-model prediction entropy is below `e0`.
    EntropyThreshold { e0: f64 },
    /// Keep samples whose score on the originally predicted class did not
    /// drop: `score_hat - score_tilde >= margin`.
    ConfidenceDifference {
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default = "default_score_space")]
        score_space: ScoreSpace,
    },
}

impl SelectionStrategy {
    pub fn confidence_difference() -> Self {
        SelectionStrategy::ConfidenceDifference { margin: 0.0, score_space: ScoreSpace::Softmax }
    }

    /// The conventional entropy threshold `0.4 * ln C`.
    pub fn entropy_threshold_default(num_classes: usize) -> Self {
        SelectionStrategy::EntropyThreshold { e0: 0.4 * (num_classes as f64).ln() }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        match self {
            SelectionStrategy::All => Ok(()),
            SelectionStrategy::ConfidenceThreshold { p } => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(AdaptError::InvalidConfig {
                        context: format!("confidence threshold p must lie in (0,1), got {p}"),
                    });
                }
                Ok(())
            }
            SelectionStrategy::EntropyThreshold { e0 } => {
                if !(*e0 > 0.0) || !e0.is_finite() {
                    return Err(AdaptError::InvalidConfig {
                        context: format!("entropy threshold e0 must be positive, got {e0}"),
                    });
                }
                Ok(())
            }
            SelectionStrategy::ConfidenceDifference { margin, .. } => {
                if !margin.is_finite() {
                    return Err(AdaptError::InvalidConfig { context: "margin must be finite".into() });
                }
                Ok(())
            }
        }
    }
}

/// Optimizer choice for the adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

/// Mutable optimizer state sized to the parameters in scope.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        OptimizerState { kind, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    /// One update step; returns the applied parameter delta.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Vec<f64> {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        let mut delta = vec![0.0; params.len()];
        match &self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    delta[i] = -lr * grads[i];
                    params[i] += delta[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    delta[i] = -lr * m_hat / (v_hat.sqrt() + eps);
                    params[i] += delta[i];
                }
            }
        }
        delta
    }
}

/// Which objective the step minimizes over the selected samples. Both
/// objectives share the mean-prediction entropy regularizer weighted by
/// `lambda_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    SelectedEntropy,
    Gce {
        #[serde(default = "default_gce_q")]
        q: f64,
    },
}

fn default_gce_q() -> f64 {
    0.8
}

/// Full adaptation configuration for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub strategy: SelectionStrategy,
    pub scope: ParamScope,
    pub lambda_max: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl AdaptationConfig {
    /// The conventional learning rate for a scope: 1e-3 when only affine
    /// parameters move, 1e-4 when everything does.
    pub fn default_learning_rate(scope: ParamScope) -> f64 {
        match scope {
            ParamScope::AffineOnly => 1e-3,
            ParamScope::AllParams => 1e-4,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        self.strategy.validate()?;
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            return Err(AdaptError::InvalidConfig {
                context: format!("lambda_max must be >= 0, got {}", self.lambda_max),
            });
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(AdaptError::InvalidConfig {
                context: format!("learning_rate must be >= 0, got {}", self.learning_rate),
            });
        }
        if self.batch_size < 2 {
            return Err(AdaptError::InvalidConfig { context: "batch_size must be >= 2".into() });
        }
        if let LossKind::Gce { q } = self.loss_kind {
            if !(q > 0.0 && q <= 1.0) {
                return Err(AdaptError::InvalidConfig {
                    context: format!("gce q must lie in (0,1], got {q}"),
                });
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0) {
                return Err(AdaptError::InvalidConfig { context: "invalid adam hyperparameters".into() });
            }
        }
        Ok(())
    }
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            strategy: SelectionStrategy::confidence_difference(),
            scope: ParamScope::AffineOnly,
            lambda_max: 0.5,
            learning_rate: Self::default_learning_rate(ParamScope::AffineOnly),
            optimizer: OptimizerKind::adam_default(),
            batch_size: 200,
            loss_kind: LossKind::SelectedEntropy,
            seed: 0,
        }
    }
}

/// Outputs of running both models on one batch.
#[derive(Clone, Debug)]
pub struct PairPrediction {
    /// Softmax outputs of the original model.
    pub y_tilde: Mat,
    /// Softmax outputs of the adapted model.
    pub y_hat: Mat,
    pub logits_tilde: Mat,
    pub logits_hat: Mat,
    /// Per-row argmax of `y_tilde`, ties toward the lowest class index.
    pub c_o: Vec<usize>,
    /// Per-row argmax of `y_hat`, same tie rule.
    pub c_a: Vec<usize>,
}

impl PairPrediction {
    /// Confidence of the original model on its own predicted class.
    pub fn conf_tilde(&self, i: usize) -> f64 {
        self.y_tilde.get(i, self.c_o[i])
    }

    /// Confidence of the adapted model on the original predicted class.
    pub fn conf_hat(&self, i: usize) -> f64 {
        self.y_hat.get(i, self.c_o[i])
    }
}

fn predict_pair_traced(
    pair: &ModelPair,
    features: &Mat,
) -> Result<(PairPrediction, ForwardTrace), AdaptError> {
    if !pair.theta_o.any_test_batch_stats() || !pair.theta_a.any_test_batch_stats() {
        return Err(AdaptError::InvalidConfig {
            context: "predict_pair requires both models in test-batch-statistics mode".into(),
        });
    }
    let (logits_tilde, _) = nn::forward(&pair.theta_o, features)?;
    let (logits_hat, trace_a) = nn::forward(&pair.theta_a, features)?;
    let y_tilde = nn::softmax(&logits_tilde)?;
    let y_hat = nn::softmax(&logits_hat)?;
    let n = features.rows();
    let c_o: Vec<usize> = (0..n).map(|i| y_tilde.argmax_row(i)).collect();
    let c_a: Vec<usize> = (0..n).map(|i| y_hat.argmax_row(i)).collect();
    Ok((PairPrediction { y_tilde, y_hat, logits_tilde, logits_hat, c_o, c_a }, trace_a))
}

/// Runs both models of the pair on a batch.
pub fn predict_pair(pair: &ModelPair, features: &Mat) -> Result<PairPrediction, AdaptError> {
    predict_pair_traced(pair, features).map(|(p, _)| p)
}

/// Applies a selection strategy to a pair prediction, returning the keep
/// mask.
pub fn select(strategy: &SelectionStrategy, pred: &PairPrediction) -> Result<Vec<bool>, AdaptError> {
    strategy.validate()?;
    let n = pred.y_hat.rows();
    let mut mask = Vec::with_capacity(n);
    match strategy {
        SelectionStrategy::All => mask.resize(n, true),
        SelectionStrategy::ConfidenceThreshold { p } => {
            for i in 0..n {
                let max = pred.y_hat.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mask.push(max >= *p);
            }
        }
        SelectionStrategy::EntropyThreshold { e0 } => {
            for i in 0..n {
                mask.push(entropy_unchecked(pred.y_hat.row(i)) < *e0);
            }
        }
        SelectionStrategy::ConfidenceDifference { margin, score_space } => {
            for i in 0..n {
                let c = pred.c_o[i];
                let (hat, tilde) = match score_space {
                    ScoreSpace::Softmax => (pred.y_hat.get(i, c), pred.y_tilde.get(i, c)),
                    ScoreSpace::Logit => (pred.logits_hat.get(i, c), pred.logits_tilde.get(i, c)),
                };
                mask.push(hat - tilde >= *margin);
            }
        }
    }
    Ok(mask)
}

/// Selected-entropy objective: the mean prediction entropy over selected
/// samples minus `lambda_max` times the entropy of the mean prediction over
/// the whole batch. With nothing selected, the first term is 0.
pub fn tta_loss(y_hat: &Mat, mask: &[bool], lambda_max: f64) -> f64 {
    let n = y_hat.rows();
    debug_assert_eq!(mask.len(), n);
    let selected = mask.iter().filter(|&&s| s).count();
    let mut loss = 0.0;
    if selected > 0 {
        for i in 0..n {
            if mask[i] {
                loss += entropy_unchecked(y_hat.row(i));
            }
        }
        loss /= selected as f64;
    }
    if lambda_max != 0.0 && n > 0 {
        let mean = mean_prediction(y_hat);
        loss -= lambda_max * entropy_unchecked(&mean);
    }
    loss
}

/// Generalized cross-entropy over the selected samples' confidence on the
/// originally predicted class: mean of `(1 - conf^q) / q`.
pub fn gce_loss(y_hat: &Mat, c_o: &[usize], mask: &[bool], q: f64) -> f64 {
    let selected = mask.iter().filter(|&&s| s).count();
    if selected == 0 {
        return 0.0;
    }
    let mut loss = 0.0;
    for i in 0..y_hat.rows() {
        if mask[i] {
            let p = y_hat.get(i, c_o[i]);
            loss += (1.0 - p.powf(q)) / q;
        }
    }
    loss / selected as f64
}

fn mean_prediction(y_hat: &Mat) -> Vec<f64> {
    let n = y_hat.rows() as f64;
    let mut mean = vec![0.0; y_hat.cols()];
    for i in 0..y_hat.rows() {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += y_hat.get(i, k);
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Gradient of [`tta_loss`] on the adapted model's logits. The selection
/// mask is a constant of the optimization: gradients flow through the
/// selected samples' entropy terms and through every sample's contribution
/// to the mean prediction.
pub fn tta_loss_grad_on_logits(y_hat: &Mat, mask: &[bool], lambda_max: f64) -> Mat {
    let n = y_hat.rows();
    let c = y_hat.cols();
    let selected = mask.iter().filter(|&&s| s).count();
    let mut grad = Mat::zeros(n, c);

    if selected > 0 {
        let w = 1.0 / selected as f64;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = y_hat.row(i);
            let h = entropy_unchecked(row);
            let g = grad.row_mut(i);
            for (k, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    g[k] += w * (-p * (p.max(LOG_FLOOR).ln() + h));
                }
            }
        }
    }

    if lambda_max != 0.0 {
        // d(-lambda * H(mean))/dz_{ik} = (lambda/n) p_{ik} (u_k - <u, p_i>)
        // with u_k = ln(mean_k).
        let mean = mean_prediction(y_hat);
        let u: Vec<f64> = mean.iter().map(|&m| m.max(LOG_FLOOR).ln()).collect();
        let nf = n as f64;
        for i in 0..n {
            let row = y_hat.row(i);
            let avg_u: f64 = row.iter().zip(&u).map(|(&p, &uk)| p * uk).sum();
            let g = grad.row_mut(i);
            for (k, &p) in row.iter().enumerate() {
                g[k] += lambda_max / nf * p * (u[k] - avg_u);
            }
        }
    }

    grad
}

/// Gradient of [`gce_loss`] on the adapted model's logits, with the same
/// constant-mask convention.
pub fn gce_loss_grad_on_logits(y_hat: &Mat, c_o: &[usize], mask: &[bool], q: f64) -> Mat {
    let n = y_hat.rows();
    let c = y_hat.cols();
    let selected = mask.iter().filter(|&&s| s).count();
    let mut grad = Mat::zeros(n, c);
    if selected == 0 {
        return grad;
    }
    let w = 1.0 / selected as f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let label = c_o[i];
        let row = y_hat.row(i);
        let p_c = row[label];
        // d[(1-p^q)/q]/dz_j = -p_c^q (delta_{cj} - p_j)
        let scale = -w * p_c.powf(q);
        let g = grad.row_mut(i);
        for (k, &p) in row.iter().enumerate() {
            let delta = if k == label { 1.0 } else { 0.0 };
            g[k] += scale * (delta - p);
        }
    }
    grad
}

/// Analytic gradients of the configured objective with respect to the
/// adapted model's parameters in `scope`.
pub fn loss_gradients(
    model: &SmallClassifier,
    trace: &ForwardTrace,
    y_hat: &Mat,
    c_o: &[usize],
    mask: &[bool],
    config: &AdaptationConfig,
) -> Result<GradientSet, AdaptError> {
    let upstream = match config.loss_kind {
        LossKind::SelectedEntropy => tta_loss_grad_on_logits(y_hat, mask, config.lambda_max),
        LossKind::Gce { q } => {
            let mut g = gce_loss_grad_on_logits(y_hat, c_o, mask, q);
            if config.lambda_max != 0.0 {
                let reg = tta_loss_grad_on_logits(y_hat, &vec![false; mask.len()], config.lambda_max);
                for (gv, rv) in g.data_mut().iter_mut().zip(reg.data()) {
                    *gv += rv;
                }
            }
            g
        }
    };
    Ok(nn::backward(model, trace, &upstream, config.scope)?)
}

fn loss_value(y_hat: &Mat, c_o: &[usize], mask: &[bool], config: &AdaptationConfig) -> f64 {
    match config.loss_kind {
        LossKind::SelectedEntropy => tta_loss(y_hat, mask, config.lambda_max),
        LossKind::Gce { q } => {
            let mut v = gce_loss(y_hat, c_o, mask, q);
            if config.lambda_max != 0.0 {
                v -= config.lambda_max * entropy_unchecked(&mean_prediction(y_hat));
            }
            v
        }
    }
}

/// One adaptation step on a batch.
///
/// The returned record reflects the pre-update adapted model (predictions
/// are made online, before the update from this batch applies). When the
/// mask selects nothing the whole optimizer step is skipped, regularizer
/// included, and the adapted model stays bit-identical.
pub fn tta_step(
    pair: &mut ModelPair,
    optimizer: &mut OptimizerState,
    config: &AdaptationConfig,
    batch: &LabeledBatch,
    step_index: usize,
) -> Result<StepRecord, AdaptError> {
    config.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(AdaptError::Nn(NnError::BatchTooSmall { n }));
    }
    if batch.labels.len() != n || batch.open_flags.len() != n {
        return Err(AdaptError::BatchMismatch { context: "label/flag vectors disagree with batch size".into() });
    }

    let (pred, trace_a) = predict_pair_traced(pair, &batch.features)?;
    let mask = select(&config.strategy, &pred)?;
    let num_selected = mask.iter().filter(|&&s| s).count();
    let loss = loss_value(&pred.y_hat, &pred.c_o, &mask, config);
    if !loss.is_finite() {
        return Err(AdaptError::NonFiniteLoss { step: step_index });
    }

    let samples: Vec<SampleRecord> = (0..n)
        .map(|i| {
            let logits_row = pred.logits_hat.row(i);
            let probs_row = pred.y_hat.row(i);
            let msp = probs_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_logit = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_l = max_logit;
            let energy = max_l + logits_row.iter().map(|&v| (v - max_l).exp()).sum::<f64>().ln();
            SampleRecord {
                label: batch.labels[i],
                open: batch.open_flags[i],
                c_o: pred.c_o[i],
                c_a: pred.c_a[i],
                conf_tilde: pred.conf_tilde(i),
                conf_hat: pred.conf_hat(i),
                msp,
                max_logit,
                energy,
                selected: mask[i],
            }
        })
        .collect();

    let update_norm = if num_selected > 0 && config.learning_rate > 0.0 {
        let grads = loss_gradients(&pair.theta_a, &trace_a, &pred.y_hat, &pred.c_o, &mask, config)?;
        let flat_g = grads.flatten();
        let mut params = pair.theta_a.flatten_scope(config.scope);
        let delta = optimizer.step(&mut params, &flat_g, config.learning_rate);
        pair.theta_a.assign_scope(config.scope, &params)?;
        l2_norm(&delta)
    } else {
        0.0
    };

    Ok(StepRecord {
        step: step_index,
        round_id: batch.round_id,
        domain_id: batch.domain_id,
        loss,
        num_selected,
        update_norm,
        samples,
    })
}

/// Runs a full scenario stream through the adaptation loop.
///
/// Batches too small for batch statistics (fewer than 2 samples) are skipped
/// and noted. A failing step aborts the run; the partial log survives with
/// the abort reason recorded.
pub fn run_scenario(
    pair: &mut ModelPair,
    config: &AdaptationConfig,
    stream: impl Iterator<Item = LabeledBatch>,
) -> RunLog {
    let mut log = RunLog::new();
    if let Err(e) = config.validate() {
        log.aborted = Some(e.to_string());
        return log;
    }
    let mut optimizer = OptimizerState::new(config.optimizer.clone(), pair.theta_a.param_count(config.scope));
    let mut step_index = 0usize;
    for batch in stream {
        if batch.len() < 2 {
            log.skipped_batches.push(SkippedBatch {
                round_id: batch.round_id,
                domain_id: batch.domain_id,
                size: batch.len(),
            });
            continue;
        }
        match tta_step(pair, &mut optimizer, config, &batch, step_index) {
            Ok(record) => log.records.push(record),
            Err(e) => {
                log.aborted = Some(format!("step {step_index}: {e}"));
                return log;
            }
        }
        step_index += 1;
    }
    log
}
