//! Synthetic source distributions and corrupted continual-domain test
//! streams with optional open-set contamination.
//!
//! Everything here is a pure function of the specs and their seeds: the same
//! `ScenarioSpec` always yields a bit-identical batch sequence.

mod tabular;

pub use tabular::{load_tabular, save_pool_binary, TabularFormat, TabularKind, POOL_FORMAT_VERSION};

use crate::linalg::Mat;
use crate::nn::{self, NnError, ParamScope, SmallClassifier, StatsMode};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from stream specification and generation.
#[derive(Clone, Debug, PartialEq)]
pub enum StreamError {
    InvalidSpec { context: String },
    Nn(NnError),
    TrainingDiverged { epoch: usize },
    Parse { line: usize, context: String },
    Io { context: String },
}

impl fmt::Display for StreamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamError::InvalidSpec { context } => write!(f, "invalid spec: {context}"),
            StreamError::Nn(e) => write!(f, "model error: {e}"),
            StreamError::TrainingDiverged { epoch } => {
                write!(f, "pretraining diverged (non-finite loss) at epoch {epoch}")
            }
            StreamError::Parse { line, context } => write!(f, "parse error at line {line}: {context}"),
            StreamError::Io { context } => write!(f, "i/o error: {context}"),
        }
    }
}

impl std::error::Error for StreamError {}

impl From<NnError> for StreamError {
    fn from(e: NnError) -> Self {
        StreamError::Nn(e)
    }
}

/// Derives an independent RNG from a base seed and a context tag, so each
/// generation site gets its own deterministic stream.
fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        s = s.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(t).rotate_left(17);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// A pool of labeled feature rows. Labels are closed-set class indices in
/// `[0, C)`, with `C` itself allowed as the open-set sentinel where a
/// consumer declares it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub features: Mat,
    pub labels: Vec<usize>,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A mini-batch drawn from a test stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Mat,
    /// Closed-set labels in `[0, C)`; open-set samples carry the sentinel `C`.
    pub labels: Vec<usize>,
    pub open_flags: Vec<bool>,
    pub domain_id: usize,
    pub round_id: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks the open-flag/label-sentinel consistency invariant.
    pub fn flags_consistent(&self, num_classes: usize) -> bool {
        self.labels
            .iter()
            .zip(&self.open_flags)
            .all(|(&l, &open)| open == (l == num_classes))
    }
}

/// Isotropic-Gaussian mixture standing in for a source image distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSourceSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// One mean vector per class; pairwise distinct.
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic standard deviation around each class mean.
    pub class_cov_scale: f64,
    pub samples_per_class: usize,
    /// Held-out clean test samples per class.
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl SyntheticSourceSpec {
    /// Spec with class means placed on a sphere of the given radius by
    /// farthest-point sampling over random candidates, so pairwise
    /// separations stay large even at low dimension.
    pub fn well_separated(
        num_classes: usize,
        feature_dim: usize,
        mean_radius: f64,
        class_cov_scale: f64,
        samples_per_class: usize,
        holdout_per_class: usize,
        seed: u64,
    ) -> Self {
        let mut rng = derive_rng(seed, &[0xC1A5]);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut m: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = crate::linalg::l2_norm(&m).max(1e-9);
            for v in &mut m {
                *v *= mean_radius / norm;
            }
            m
        };
        let mut class_means: Vec<Vec<f64>> = vec![draw(&mut rng)];
        while class_means.len() < num_classes {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..64 {
                let candidate = draw(&mut rng);
                let min_dist = class_means
                    .iter()
                    .map(|m| {
                        m.iter()
                            .zip(&candidate)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                if best.as_ref().map(|(d, _)| min_dist > *d).unwrap_or(true) {
                    best = Some((min_dist, candidate));
                }
            }
            class_means.push(best.expect("candidates drawn").1);
        }
        SyntheticSourceSpec {
            num_classes,
            feature_dim,
            class_means,
            class_cov_scale,
            samples_per_class,
            holdout_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if self.num_classes < 2 {
            return Err(StreamError::InvalidSpec { context: "need at least 2 classes".into() });
        }
        if self.feature_dim == 0 {
            return Err(StreamError::InvalidSpec { context: "feature_dim must be positive".into() });
        }
        if self.class_means.len() != self.num_classes {
            return Err(StreamError::InvalidSpec {
                context: format!(
                    "expected {} class means, got {}",
                    self.num_classes,
                    self.class_means.len()
                ),
            });
        }
        for (i, m) in self.class_means.iter().enumerate() {
            if m.len() != self.feature_dim {
                return Err(StreamError::InvalidSpec {
                    context: format!("class mean {i} has dimension {}, expected {}", m.len(), self.feature_dim),
                });
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(StreamError::InvalidSpec { context: format!("class mean {i} has non-finite entries") });
            }
        }
        for i in 0..self.class_means.len() {
            for j in i + 1..self.class_means.len() {
                if self.class_means[i] == self.class_means[j] {
                    return Err(StreamError::InvalidSpec {
                        context: format!("class means {i} and {j} coincide"),
                    });
                }
            }
        }
        if !(self.class_cov_scale > 0.0) || !self.class_cov_scale.is_finite() {
            return Err(StreamError::InvalidSpec {
                context: format!("class_cov_scale must be positive, got {}", self.class_cov_scale),
            });
        }
        Ok(())
    }
}

fn sample_gaussian_rows(
    means: &[Vec<f64>],
    class_for_row: &[usize],
    cov_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Mat {
    let d = means[0].len();
    let mut m = Mat::zeros(class_for_row.len(), d);
    for (i, &c) in class_for_row.iter().enumerate() {
        let row = m.row_mut(i);
        for (k, r) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *r = means[c][k] + cov_scale * z;
        }
    }
    m
}

/// Draws the source train set and a disjoint held-out clean test set.
///
/// Per-class counts are exact and every class uses its own derived RNG
/// stream, so sets are deterministic under the spec seed.
pub fn generate_source(spec: &SyntheticSourceSpec) -> Result<(LabeledPool, LabeledPool), StreamError> {
    spec.validate()?;
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for c in 0..spec.num_classes {
        let mut rng = derive_rng(spec.seed, &[1, c as u64]);
        let classes = vec![c; spec.samples_per_class + spec.holdout_per_class];
        let all = sample_gaussian_rows(&spec.class_means, &classes, spec.class_cov_scale, &mut rng);
        for i in 0..spec.samples_per_class {
            train_rows.push(all.row(i).to_vec());
            train_labels.push(c);
        }
        for i in spec.samples_per_class..classes.len() {
            test_rows.push(all.row(i).to_vec());
            test_labels.push(c);
        }
    }
    let d = spec.feature_dim;
    let train = LabeledPool {
        features: if train_rows.is_empty() { Mat::zeros(0, d) } else { Mat::from_rows(&train_rows) },
        labels: train_labels,
    };
    let test = LabeledPool {
        features: if test_rows.is_empty() { Mat::zeros(0, d) } else { Mat::from_rows(&test_rows) },
        labels: test_labels,
    };
    Ok((train, test))
}

/// Source pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// EMA momentum for the running batch-norm statistics.
    pub momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, learning_rate: 2e-2, batch_size: 64, seed: 0, momentum: 0.1 }
    }
}

/// Trains the classifier on the source set with cross-entropy and SGD,
/// accumulating batch-norm running statistics along the way. The returned
/// model has its statistics frozen (`SourceStats`).
///
/// With `epochs = 0` no gradient steps happen; the model gets a single
/// statistics-population pass and is returned at its initialization.
pub fn pretrain_source(
    mut model: SmallClassifier,
    train: &LabeledPool,
    cfg: &PretrainConfig,
) -> Result<SmallClassifier, StreamError> {
    if train.is_empty() {
        return Err(StreamError::InvalidSpec { context: "pretraining set is empty".into() });
    }
    if cfg.batch_size < 2 {
        return Err(StreamError::InvalidSpec { context: "pretrain batch_size must be >= 2".into() });
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(StreamError::InvalidSpec { context: "pretrain learning_rate must be positive".into() });
    }
    model.set_stats_mode(StatsMode::TestBatchStats);
    let n = train.len();
    let c = model.num_classes();
    let mut order: Vec<usize> = (0..n).collect();

    let passes = cfg.epochs.max(1);
    for epoch in 0..passes {
        let stats_only = cfg.epochs == 0;
        let mut rng = derive_rng(cfg.seed, &[2, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics undefined
            }
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| train.features.row(i).to_vec()).collect();
            let batch = Mat::from_rows(&rows);
            let (logits, trace) = nn::forward(&model, &batch)?;
            model.update_running_stats(&trace, cfg.momentum)?;
            if stats_only {
                continue;
            }
            let probs = nn::softmax(&logits)?;
            // Cross-entropy gradient on logits: (p - onehot) / batch.
            let bn = chunk.len() as f64;
            let mut upstream = Mat::zeros(chunk.len(), c);
            let mut loss = 0.0;
            for (bi, &i) in chunk.iter().enumerate() {
                let label = train.labels[i];
                let p = probs.get(bi, label);
                loss -= p.max(crate::nn::LOG_FLOOR).ln() / bn;
                for k in 0..c {
                    let grad = (probs.get(bi, k) - if k == label { 1.0 } else { 0.0 }) / bn;
                    upstream.set(bi, k, grad);
                }
            }
            if !loss.is_finite() {
                return Err(StreamError::TrainingDiverged { epoch });
            }
            let grads = nn::backward(&model, &trace, &upstream, ParamScope::AllParams)?;
            let flat_g = grads.flatten();
            let mut params = model.flatten_scope(ParamScope::AllParams);
            for (p, g) in params.iter_mut().zip(&flat_g) {
                *p -= cfg.learning_rate * g;
            }
            model.assign_scope(ParamScope::AllParams, &params)?;
        }
        if cfg.epochs == 0 {
            break;
        }
    }
    model.set_stats_mode(StatsMode::SourceStats);
    Ok(model)
}

/// Classification accuracy of a model on a pool, using whatever statistics
/// mode the model is currently in.
pub fn pool_accuracy(model: &SmallClassifier, pool: &LabeledPool) -> Result<f64, StreamError> {
    if pool.is_empty() {
        return Err(StreamError::InvalidSpec { context: "empty evaluation pool".into() });
    }
    let (logits, _) = nn::forward(model, &pool.features)?;
    let mut correct = 0usize;
    for (i, &label) in pool.labels.iter().enumerate() {
        if logits.argmax_row(i) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / pool.len() as f64)
}

/// Parametric feature-space corruption families.
///
/// Effective magnitudes scale with severity:
/// - `GaussianNoise`: additive noise with std `sigma * severity`.
/// - `FeatureScale`: multiplies even-indexed coordinates by
///   `1 + (factor - 1) * severity`. Scaling alternating coordinates keeps
///   the shift visible to a model normalizing with test-batch statistics
///   (a uniform scale would be absorbed by the first normalization layer).
/// - `Rotation2dPairs`: rotates each coordinate pair `(2k, 2k+1)` by
///   `angle * severity` radians.
/// - `MeanShift`: adds `delta * severity` to every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise { sigma: f64 },
    FeatureScale { factor: f64 },
    Rotation2dPairs { angle: f64 },
    MeanShift { delta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionOp {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionOp {
    pub fn validate(&self, feature_dim: usize) -> Result<(), StreamError> {
        if !(1..=5).contains(&self.severity) {
            return Err(StreamError::InvalidSpec {
                context: format!("severity must be in 1..=5, got {}", self.severity),
            });
        }
        match &self.kind {
            CorruptionKind::GaussianNoise { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(StreamError::InvalidSpec { context: "sigma must be finite and >= 0".into() });
                }
            }
            CorruptionKind::FeatureScale { factor } => {
                if !factor.is_finite() {
                    return Err(StreamError::InvalidSpec { context: "factor must be finite".into() });
                }
            }
            CorruptionKind::Rotation2dPairs { angle } => {
                if !angle.is_finite() {
                    return Err(StreamError::InvalidSpec { context: "angle must be finite".into() });
                }
            }
            CorruptionKind::MeanShift { delta } => {
                if delta.len() != feature_dim {
                    return Err(StreamError::InvalidSpec {
                        context: format!("mean-shift delta has dimension {}, expected {feature_dim}", delta.len()),
                    });
                }
                if !delta.iter().all(|v| v.is_finite()) {
                    return Err(StreamError::InvalidSpec { context: "mean-shift delta must be finite".into() });
                }
            }
        }
        Ok(())
    }

    /// Applies the corruption in place. `rng` is only consumed by the
    /// stochastic families.
    pub fn apply(&self, features: &mut Mat, rng: &mut ChaCha8Rng) {
        let s = self.severity as f64;
        match &self.kind {
            CorruptionKind::GaussianNoise { sigma } => {
                let eff = sigma * s;
                for v in features.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += eff * z;
                }
            }
            CorruptionKind::FeatureScale { factor } => {
                let eff = 1.0 + (factor - 1.0) * s;
                let cols = features.cols();
                for i in 0..features.rows() {
                    let row = features.row_mut(i);
                    for k in (0..cols).step_by(2) {
                        row[k] *= eff;
                    }
                }
            }
            CorruptionKind::Rotation2dPairs { angle } => {
                let eff = angle * s;
                let (sin, cos) = eff.sin_cos();
                let cols = features.cols();
                for i in 0..features.rows() {
                    let row = features.row_mut(i);
                    let mut k = 0;
                    while k + 1 < cols {
                        let (a, b) = (row[k], row[k + 1]);
                        row[k] = cos * a - sin * b;
                        row[k + 1] = sin * a + cos * b;
                        k += 2;
                    }
                }
            }
            CorruptionKind::MeanShift { delta } => {
                for i in 0..features.rows() {
                    let row = features.row_mut(i);
                    for (k, d) in delta.iter().enumerate() {
                        row[k] += d * s;
                    }
                }
            }
        }
    }
}

/// Whether and how the stream mixes open-set samples into batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OpenSetMode {
    Off,
    /// Half of every batch comes from these unknown-class clusters,
    /// corrupted by the same op as the closed-set half.
    Mixed { open_class_means: Vec<Vec<f64>> },
}

/// A full continual-adaptation scenario: the source distribution, the
/// ordered corruption domains, repetition rounds, and open-set mixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub source: SyntheticSourceSpec,
    pub corruption_sequence: Vec<CorruptionOp>,
    pub rounds: usize,
    pub open_set: OpenSetMode,
    pub batch_size: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), StreamError> {
        self.source.validate()?;
        if self.corruption_sequence.is_empty() {
            return Err(StreamError::InvalidSpec { context: "corruption sequence must be nonempty".into() });
        }
        for op in &self.corruption_sequence {
            op.validate(self.source.feature_dim)?;
        }
        if self.rounds == 0 {
            return Err(StreamError::InvalidSpec { context: "rounds must be >= 1".into() });
        }
        if self.batch_size < 2 {
            return Err(StreamError::InvalidSpec { context: "batch_size must be >= 2".into() });
        }
        if let OpenSetMode::Mixed { open_class_means } = &self.open_set {
            if open_class_means.is_empty() {
                return Err(StreamError::InvalidSpec { context: "open_class_means must be nonempty".into() });
            }
            for (i, m) in open_class_means.iter().enumerate() {
                if m.len() != self.source.feature_dim {
                    return Err(StreamError::InvalidSpec {
                        context: format!("open mean {i} has dimension {}, expected {}", m.len(), self.source.feature_dim),
                    });
                }
                if !m.iter().all(|v| v.is_finite()) {
                    return Err(StreamError::InvalidSpec { context: format!("open mean {i} has non-finite entries") });
                }
            }
        }
        Ok(())
    }

    /// Open-set cluster means mirrored through the origin and scaled, the
    /// default placement for unknown classes under the same covariate shift.
    pub fn mirrored_open_means(source: &SyntheticSourceSpec, scale: f64) -> Vec<Vec<f64>> {
        source
            .class_means
            .iter()
            .map(|m| m.iter().map(|v| -scale * v).collect())
            .collect()
    }
}

/// The corrupted closed-set pool for one domain. Identical across rounds:
/// corruption randomness derives from `(seed, domain)` only, mirroring a
/// fixed corrupted test set revisited every round.
pub fn domain_closed_pool(spec: &ScenarioSpec, domain_id: usize) -> Result<LabeledPool, StreamError> {
    spec.validate()?;
    let (_, clean_test) = generate_source(&spec.source)?;
    let op = &spec.corruption_sequence[domain_id % spec.corruption_sequence.len()];
    let mut features = clean_test.features.clone();
    let mut rng = derive_rng(spec.seed, &[3, domain_id as u64]);
    op.apply(&mut features, &mut rng);
    Ok(LabeledPool { features, labels: clean_test.labels })
}

fn domain_open_pool(
    spec: &ScenarioSpec,
    open_means: &[Vec<f64>],
    domain_id: usize,
    count: usize,
) -> Mat {
    let mut rng = derive_rng(spec.seed, &[4, domain_id as u64]);
    let classes: Vec<usize> = (0..count).map(|i| i % open_means.len()).collect();
    let mut features = sample_gaussian_rows(open_means, &classes, spec.source.class_cov_scale, &mut rng);
    let op = &spec.corruption_sequence[domain_id % spec.corruption_sequence.len()];
    let mut crng = derive_rng(spec.seed, &[5, domain_id as u64]);
    op.apply(&mut features, &mut crng);
    features
}

/// Deterministic iterator over the scenario's batches: for each round, each
/// corruption domain in order, batches covering that domain's closed pool.
///
/// In `Mixed` mode every full batch holds `ceil(n/2)` closed and
/// `floor(n/2)` open samples (closed block first); a short final batch keeps
/// the counts balanced. Per-round sample order is a seeded shuffle.
pub struct Stream {
    spec: ScenarioSpec,
    clean_test: LabeledPool,
    round: usize,
    domain_in_round: usize,
    /// Batches of the current (round, domain), materialized lazily.
    pending: Vec<LabeledBatch>,
}

impl Stream {
    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    fn load_domain(&mut self) {
        let domain_id = self.domain_in_round;
        let round_id = self.round;
        let spec = &self.spec;
        let op = &spec.corruption_sequence[domain_id];
        let c = spec.source.num_classes;

        // Corrupted closed pool, fixed across rounds.
        let mut closed = self.clean_test.features.clone();
        let mut rng = derive_rng(spec.seed, &[3, domain_id as u64]);
        op.apply(&mut closed, &mut rng);
        let closed_labels = &self.clean_test.labels;

        let pool_len = closed_labels.len();
        let mut order: Vec<usize> = (0..pool_len).collect();
        let mut order_rng = derive_rng(spec.seed, &[6, round_id as u64, domain_id as u64]);
        order.shuffle(&mut order_rng);

        let n = spec.batch_size;
        let mut batches = Vec::new();
        match &spec.open_set {
            OpenSetMode::Off => {
                for chunk in order.chunks(n) {
                    let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| closed.row(i).to_vec()).collect();
                    let labels: Vec<usize> = chunk.iter().map(|&i| closed_labels[i]).collect();
                    let len = labels.len();
                    batches.push(LabeledBatch {
                        features: Mat::from_rows(&rows),
                        labels,
                        open_flags: vec![false; len],
                        domain_id,
                        round_id,
                    });
                }
            }
            OpenSetMode::Mixed { open_class_means } => {
                let closed_per_batch = n.div_ceil(2);
                let open_per_batch = n / 2;
                let num_batches = pool_len.div_ceil(closed_per_batch);
                // Exactly enough open samples to pair every closed chunk.
                let mut open_needed = 0usize;
                for chunk in order.chunks(closed_per_batch) {
                    open_needed += open_per_batch.min(chunk.len());
                }
                let open_features = domain_open_pool(spec, open_class_means, domain_id, open_needed);
                let mut open_cursor = 0usize;
                for (b, chunk) in order.chunks(closed_per_batch).enumerate() {
                    let open_count = open_per_batch.min(chunk.len());
                    let mut rows: Vec<Vec<f64>> = chunk.iter().map(|&i| closed.row(i).to_vec()).collect();
                    let mut labels: Vec<usize> = chunk.iter().map(|&i| closed_labels[i]).collect();
                    let mut flags = vec![false; chunk.len()];
                    for k in 0..open_count {
                        rows.push(open_features.row(open_cursor + k).to_vec());
                        labels.push(c);
                        flags.push(true);
                    }
                    open_cursor += open_count;
                    batches.push(LabeledBatch {
                        features: Mat::from_rows(&rows),
                        labels,
                        open_flags: flags,
                        domain_id,
                        round_id,
                    });
                    debug_assert!(b < num_batches);
                }
            }
        }
        batches.reverse(); // pop from the back in order
        self.pending = batches;
    }
}

impl Iterator for Stream {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        loop {
            if let Some(batch) = self.pending.pop() {
                return Some(batch);
            }
            if self.round >= self.spec.rounds {
                return None;
            }
            self.load_domain();
            // Advance the (round, domain) cursor past the domain just loaded.
            self.domain_in_round += 1;
            if self.domain_in_round >= self.spec.corruption_sequence.len() {
                self.domain_in_round = 0;
                self.round += 1;
            }
        }
    }
}

/// Builds the deterministic batch stream for a scenario.
pub fn make_stream(spec: &ScenarioSpec) -> Result<Stream, StreamError> {
    spec.validate()?;
    let (_, clean_test) = generate_source(&spec.source)?;
    Ok(Stream {
        spec: spec.clone(),
        clean_test,
        round: 0,
        domain_in_round: 0,
        pending: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSourceSpec {
        SyntheticSourceSpec::well_separated(3, 6, 3.0, 0.5, 40, 20, 7)
    }

    fn scenario(open: bool) -> ScenarioSpec {
        let source = small_spec();
        let open_set = if open {
            OpenSetMode::Mixed { open_class_means: ScenarioSpec::mirrored_open_means(&source, 2.5) }
        } else {
            OpenSetMode::Off
        };
        ScenarioSpec {
            source,
            corruption_sequence: vec![
                CorruptionOp { kind: CorruptionKind::GaussianNoise { sigma: 0.2 }, severity: 5 },
                CorruptionOp { kind: CorruptionKind::Rotation2dPairs { angle: 0.15 }, severity: 3 },
            ],
            rounds: 2,
            open_set,
            batch_size: 20,
            seed: 99,
        }
    }

    #[test]
    fn generate_source_is_deterministic_and_counts_exact() {
        let spec = small_spec();
        let (train_a, test_a) = generate_source(&spec).unwrap();
        let (train_b, test_b) = generate_source(&spec).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(train_a.len(), 3 * 40);
        assert_eq!(test_a.len(), 3 * 20);
        for c in 0..3 {
            assert_eq!(train_a.labels.iter().filter(|&&l| l == c).count(), 40);
            assert_eq!(test_a.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn generate_source_empty_when_zero_samples() {
        let mut spec = small_spec();
        spec.samples_per_class = 0;
        spec.holdout_per_class = 0;
        let (train, test) = generate_source(&spec).unwrap();
        assert!(train.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn generate_source_rejects_bad_cov() {
        let mut spec = small_spec();
        spec.class_cov_scale = 0.0;
        assert!(matches!(generate_source(&spec), Err(StreamError::InvalidSpec { .. })));
    }

    #[test]
    fn class_conditional_means_converge_to_spec_means() {
        // Statistical check at n = 10000 per class: the sample mean lands
        // within 3 sigma / sqrt(n) of the spec mean per coordinate (allow 4
        // sigma to keep flakiness negligible while still binding).
        let mut spec = small_spec();
        spec.samples_per_class = 10_000;
        spec.holdout_per_class = 0;
        let (train, _) = generate_source(&spec).unwrap();
        let n = 10_000f64;
        let tol = 4.0 * spec.class_cov_scale / n.sqrt();
        let d = spec.feature_dim;
        for c in 0..spec.num_classes {
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for (i, &l) in train.labels.iter().enumerate() {
                if l == c {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += train.features.get(i, k);
                    }
                    count += 1.0;
                }
            }
            for (k, a) in acc.iter().enumerate() {
                let sample_mean = a / count;
                assert!(
                    (sample_mean - spec.class_means[c][k]).abs() < tol,
                    "class {c} coord {k}: {sample_mean} vs {} (tol {tol})",
                    spec.class_means[c][k]
                );
            }
        }
    }

    #[test]
    fn pretrain_epochs_zero_populates_stats_only() {
        let spec = small_spec();
        let (train, _) = generate_source(&spec).unwrap();
        let init = SmallClassifier::mlp(6, &[8], 3, 1).unwrap();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let trained = pretrain_source(init.clone(), &train, &cfg).unwrap();
        // Parameters untouched...
        assert_eq!(
            trained.flatten_scope(ParamScope::AllParams),
            init.flatten_scope(ParamScope::AllParams)
        );
        // ...but running statistics moved off their identity defaults.
        assert_ne!(trained.layers()[0].bn.running_mean, init.layers()[0].bn.running_mean);
        assert_eq!(trained.layers()[0].bn.stats_mode, StatsMode::SourceStats);
    }

    #[test]
    fn pretrain_linearly_separable_two_class_reaches_99() {
        let spec = SyntheticSourceSpec::well_separated(2, 4, 4.0, 0.4, 200, 100, 5);
        let (train, test) = generate_source(&spec).unwrap();
        let init = SmallClassifier::mlp(4, &[8], 2, 3).unwrap();
        let trained = pretrain_source(init, &train, &PretrainConfig::default()).unwrap();
        let acc = pool_accuracy(&trained, &test).unwrap();
        assert!(acc >= 0.99, "held-out accuracy {acc}");
    }

    #[test]
    fn pretrain_same_seed_same_model() {
        let spec = small_spec();
        let (train, _) = generate_source(&spec).unwrap();
        let cfg = PretrainConfig { epochs: 2, ..PretrainConfig::default() };
        let a = pretrain_source(SmallClassifier::mlp(6, &[8], 3, 1).unwrap(), &train, &cfg).unwrap();
        let b = pretrain_source(SmallClassifier::mlp(6, &[8], 3, 1).unwrap(), &train, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_is_deterministic() {
        let spec = scenario(true);
        let a: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        let b: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn stream_off_mode_counts_and_flags() {
        // pool 60, batch 20 -> 3 batches per domain, 2 domains, 2 rounds.
        let spec = scenario(false);
        let batches: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        assert_eq!(batches.len(), 3 * 2 * 2);
        assert!(batches.iter().all(|b| b.open_flags.iter().all(|&f| !f)));
        assert!(batches.iter().all(|b| b.len() == 20));
        assert_eq!(batches[0].round_id, 0);
        assert_eq!(batches.last().unwrap().round_id, 1);
    }

    #[test]
    fn stream_mixed_mode_balanced_batches() {
        let spec = scenario(true);
        let c = spec.source.num_classes;
        let batches: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        // pool 60, 10 closed per batch -> 6 batches per domain.
        assert_eq!(batches.len(), 6 * 2 * 2);
        for b in &batches {
            assert!(b.flags_consistent(c));
            let open = b.open_flags.iter().filter(|&&f| f).count();
            let closed = b.len() - open;
            assert_eq!(closed, 10);
            assert_eq!(open, 10);
        }
    }

    #[test]
    fn stream_mixed_mode_short_final_batch_stays_balanced() {
        let mut spec = scenario(true);
        spec.source.holdout_per_class = 21; // pool 63, closed chunks 10,...,10,3
        let c = spec.source.num_classes;
        let batches: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        for b in &batches {
            assert!(b.flags_consistent(c));
            let open = b.open_flags.iter().filter(|&&f| f).count() as i64;
            let closed = b.len() as i64 - open;
            assert!((closed - open).abs() <= 1, "batch imbalance: {closed} closed vs {open} open");
        }
    }

    #[test]
    fn same_domain_pool_identical_across_rounds() {
        let spec = scenario(false);
        let batches: Vec<LabeledBatch> = make_stream(&spec).unwrap().collect();
        // Collect the multiset of first-coordinate values per (round, domain 0);
        // the pools must be identical across rounds even though order differs.
        let mut r0: Vec<f64> = batches
            .iter()
            .filter(|b| b.round_id == 0 && b.domain_id == 0)
            .flat_map(|b| (0..b.len()).map(|i| b.features.get(i, 0)).collect::<Vec<_>>())
            .collect();
        let mut r1: Vec<f64> = batches
            .iter()
            .filter(|b| b.round_id == 1 && b.domain_id == 0)
            .flat_map(|b| (0..b.len()).map(|i| b.features.get(i, 0)).collect::<Vec<_>>())
            .collect();
        r0.sort_by(f64::total_cmp);
        r1.sort_by(f64::total_cmp);
        assert_eq!(r0, r1);
        // But the emission order within the domain differs between rounds.
        let o0: Vec<f64> = batches
            .iter()
            .filter(|b| b.round_id == 0 && b.domain_id == 0)
            .flat_map(|b| (0..b.len()).map(|i| b.features.get(i, 0)).collect::<Vec<_>>())
            .collect();
        let o1: Vec<f64> = batches
            .iter()
            .filter(|b| b.round_id == 1 && b.domain_id == 0)
            .flat_map(|b| (0..b.len()).map(|i| b.features.get(i, 0)).collect::<Vec<_>>())
            .collect();
        assert_ne!(o0, o1);
    }

    #[test]
    fn mean_shift_is_absorbed_by_test_batch_normalization() {
        // A mean-shift corruption must not change predictions of a model
        // running on test-batch statistics.
        let spec = small_spec();
        let (train, test) = generate_source(&spec).unwrap();
        let mut model =
            pretrain_source(SmallClassifier::mlp(6, &[8], 3, 1).unwrap(), &train, &PretrainConfig::default())
                .unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let (base, _) = nn::forward(&model, &test.features).unwrap();
        let op = CorruptionOp {
            kind: CorruptionKind::MeanShift { delta: vec![0.7; 6] },
            severity: 5,
        };
        let mut shifted = test.features.clone();
        let mut rng = derive_rng(0, &[0]);
        op.apply(&mut shifted, &mut rng);
        let (moved, _) = nn::forward(&model, &shifted).unwrap();
        for i in 0..base.rows() {
            for k in 0..base.cols() {
                assert!((base.get(i, k) - moved.get(i, k)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gaussian_noise_severity_monotonically_degrades_source_model() {
        // 5 seeds, majority direction: error at severity s+1 >= error at s.
        let mut up = 0;
        let mut down = 0;
        for seed in 0..5u64 {
            let spec = SyntheticSourceSpec::well_separated(3, 6, 3.0, 0.5, 150, 100, seed);
            let (train, test) = generate_source(&spec).unwrap();
            let model =
                pretrain_source(SmallClassifier::mlp(6, &[8], 3, seed).unwrap(), &train, &PretrainConfig::default())
                    .unwrap();
            let mut prev = None;
            for severity in 1..=5u8 {
                let op = CorruptionOp { kind: CorruptionKind::GaussianNoise { sigma: 0.35 }, severity };
                let mut corrupted = test.features.clone();
                let mut rng = derive_rng(seed, &[severity as u64]);
                op.apply(&mut corrupted, &mut rng);
                let pool = LabeledPool { features: corrupted, labels: test.labels.clone() };
                let err = 1.0 - pool_accuracy(&model, &pool).unwrap();
                if let Some(p) = prev {
                    if err >= p {
                        up += 1;
                    } else {
                        down += 1;
                    }
                }
                prev = Some(err);
            }
        }
        assert!(up > down, "severity not monotone in the majority: {up} up vs {down} down");
    }
}
