//! The experiment configuration tree: a single TOML file plus
//! `--set key=value` overrides, flags winning over file values.
//!
//! Every field has a default, so a partial file (or none at all) works. The
//! default experiment mirrors the long-term continual protocol at desk
//! scale: a 15-element corruption sequence cycling four feature-space
//! families over descending severities, 50 rounds, batch 200, and an
//! open-set half in every batch drawn from mirrored unknown-class clusters.

use crate::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use tta_core::adapt::{
    AdaptationConfig, LossKind, OptimizerKind, ScoreSpace, SelectionStrategy,
};
use tta_core::nn::ParamScope;
use tta_core::streams::{
    CorruptionKind, CorruptionOp, OpenSetMode, PretrainConfig, ScenarioSpec, SyntheticSourceSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub classes: usize,
    pub feature_dim: usize,
    pub mean_radius: f64,
    pub class_cov_scale: f64,
    pub samples_per_class: usize,
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            classes: 8,
            feature_dim: 16,
            mean_radius: 2.4,
            class_cov_scale: 1.0,
            samples_per_class: 400,
            holdout_per_class: 150,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![64, 64], seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { epochs: 30, learning_rate: 2e-2, batch_size: 64, momentum: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpenSetSection {
    Off,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub open_set: OpenSetSection,
    /// Open-cluster means are the closed-class means mirrored through the
    /// origin and scaled by this factor.
    pub open_mean_scale: f64,
    /// Explicit corruption sequence; empty means the built-in 15-op cycle.
    pub corruptions: Vec<CorruptionOp>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            rounds: 50,
            batch_size: 200,
            seed: 11,
            open_set: OpenSetSection::Mixed,
            open_mean_scale: 2.5,
            corruptions: Vec::new(),
        }
    }
}

/// Strategy spec: either the compact string form (`"all"`, `"confdiff"`,
/// `"confdiff-logit"`, `"conf:0.9"`, `"entropy"`, `"entropy:0.55"`,
/// optionally `"confdiff:-0.2"` for a margin) or the full tagged table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Compact(String),
    Full(SelectionStrategy),
}

impl StrategySpec {
    pub fn resolve(&self, num_classes: usize) -> Result<SelectionStrategy> {
        match self {
            StrategySpec::Full(s) => Ok(s.clone()),
            StrategySpec::Compact(text) => parse_strategy(text, num_classes),
        }
    }
}

/// Parses the compact strategy syntax used by `--set` and sweep axes.
pub fn parse_strategy(text: &str, num_classes: usize) -> Result<SelectionStrategy> {
    let (head, arg) = match text.split_once(':') {
        Some((h, a)) => (h.trim(), Some(a.trim())),
        None => (text.trim(), None),
    };
    let parse_num = |a: &str| -> Result<f64> {
        a.parse::<f64>()
            .map_err(|_| HarnessError::Validation(format!("bad strategy parameter {a:?} in {text:?}")))
    };
    match head {
        "all" => Ok(SelectionStrategy::All),
        "confdiff" | "confdiff-softmax" => Ok(SelectionStrategy::ConfidenceDifference {
            margin: arg.map(parse_num).transpose()?.unwrap_or(0.0),
            score_space: ScoreSpace::Softmax,
        }),
        "confdiff-logit" => Ok(SelectionStrategy::ConfidenceDifference {
            margin: arg.map(parse_num).transpose()?.unwrap_or(0.0),
            score_space: ScoreSpace::Logit,
        }),
        "conf" => {
            let p = arg
                .ok_or_else(|| HarnessError::Validation(format!("conf strategy needs a threshold: {text:?}")))?;
            Ok(SelectionStrategy::ConfidenceThreshold { p: parse_num(p)? })
        }
        "entropy" => match arg {
            Some(a) => Ok(SelectionStrategy::EntropyThreshold { e0: parse_num(a)? }),
            None => Ok(SelectionStrategy::entropy_threshold_default(num_classes)),
        },
        other => Err(HarnessError::Validation(format!("unknown strategy {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerSection {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSection {
    SelectedEntropy,
    Gce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub strategy: StrategySpec,
    pub scope: ParamScope,
    pub lambda_max: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub gce_q: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            strategy: StrategySpec::Compact("confdiff".into()),
            scope: ParamScope::AffineOnly,
            lambda_max: 0.5,
            learning_rate: 1e-3,
            optimizer: OptimizerSection::Adam,
            loss: LossSection::SelectedEntropy,
            gce_q: 0.8,
            batch_size: 200,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodRounds {
    Final,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub error: bool,
    pub selection: bool,
    pub confidence_drop: bool,
    pub ood: bool,
    pub grad_sim: bool,
    /// Cap on the number of final-domain samples used for the gradient
    /// similarity matrix.
    pub grad_sim_max_samples: usize,
    /// Which slice the headline separation metrics report; both slices are
    /// always exported.
    pub ood_rounds: OodRounds,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            error: true,
            selection: true,
            confidence_drop: true,
            ood: true,
            grad_sim: true,
            grad_sim_max_samples: 600,
            ood_rounds: OodRounds::Final,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub checkpoint: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/adapt".into(), checkpoint: "runs/pretrain/theta_o.ckpt".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: SourceSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub scenario: ScenarioSection,
    pub adapt: AdaptSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses a config from TOML text (the empty string gives defaults),
    /// then applies dotted-path `--set` overrides on the raw tree.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = if text.trim().is_empty() {
            toml::Table::new()
        } else {
            text.parse()
                .map_err(|e| HarnessError::Validation(format!("config does not parse as TOML: {e}")))?
        };
        let mut value = toml::Value::Table(table);
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let config: ExperimentConfig = value
            .try_into()
            .map_err(|e| HarnessError::Validation(format!("config does not match the schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the run seed: scenario stream order and adaptation seed.
    pub fn set_run_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.build_source()?.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.build_scenario()?.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.build_adaptation()?.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        if self.pretrain.batch_size < 2 {
            return Err(HarnessError::Validation("pretrain.batch_size must be >= 2".into()));
        }
        if !(self.pretrain.momentum > 0.0 && self.pretrain.momentum <= 1.0) {
            return Err(HarnessError::Validation("pretrain.momentum must lie in (0, 1]".into()));
        }
        if self.adapt.batch_size != self.scenario.batch_size {
            return Err(HarnessError::Validation(format!(
                "adapt.batch_size ({}) must match scenario.batch_size ({})",
                self.adapt.batch_size, self.scenario.batch_size
            )));
        }
        if self.metrics.grad_sim_max_samples < 2 {
            return Err(HarnessError::Validation("metrics.grad_sim_max_samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn build_source(&self) -> Result<SyntheticSourceSpec> {
        let s = &self.source;
        if s.classes < 2 {
            return Err(HarnessError::Validation("source.classes must be >= 2".into()));
        }
        Ok(SyntheticSourceSpec::well_separated(
            s.classes,
            s.feature_dim,
            s.mean_radius,
            s.class_cov_scale,
            s.samples_per_class,
            s.holdout_per_class,
            s.seed,
        ))
    }

    /// The built-in 15-element corruption cycle: four feature-space
    /// families repeated over descending severity tiers.
    pub fn default_corruptions(&self) -> Vec<CorruptionOp> {
        let d = self.source.feature_dim;
        let severities = [5u8, 4, 3, 2];
        let mut ops = Vec::with_capacity(15);
        'outer: for &severity in &severities {
            for kind in [
                CorruptionKind::GaussianNoise { sigma: 0.5 },
                CorruptionKind::FeatureScale { factor: 1.3 },
                CorruptionKind::Rotation2dPairs { angle: 0.3 },
                CorruptionKind::MeanShift { delta: vec![0.35; d] },
            ] {
                ops.push(CorruptionOp { kind, severity });
                if ops.len() == 15 {
                    break 'outer;
                }
            }
        }
        ops
    }

    pub fn build_scenario(&self) -> Result<ScenarioSpec> {
        let source = self.build_source()?;
        let corruption_sequence = if self.scenario.corruptions.is_empty() {
            self.default_corruptions()
        } else {
            self.scenario.corruptions.clone()
        };
        let open_set = match self.scenario.open_set {
            OpenSetSection::Off => OpenSetMode::Off,
            OpenSetSection::Mixed => OpenSetMode::Mixed {
                open_class_means: ScenarioSpec::mirrored_open_means(&source, self.scenario.open_mean_scale),
            },
        };
        Ok(ScenarioSpec {
            source,
            corruption_sequence,
            rounds: self.scenario.rounds,
            open_set,
            batch_size: self.scenario.batch_size,
            seed: self.scenario.seed,
        })
    }

    pub fn build_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            momentum: self.pretrain.momentum,
            seed: self.pretrain.seed,
        }
    }

    pub fn build_adaptation(&self) -> Result<AdaptationConfig> {
        let strategy = self.adapt.strategy.resolve(self.source.classes)?;
        Ok(AdaptationConfig {
            strategy,
            scope: self.adapt.scope,
            lambda_max: self.adapt.lambda_max,
            learning_rate: self.adapt.learning_rate,
            optimizer: match self.adapt.optimizer {
                OptimizerSection::Sgd => OptimizerKind::Sgd,
                OptimizerSection::Adam => OptimizerKind::adam_default(),
            },
            batch_size: self.adapt.batch_size,
            loss_kind: match self.adapt.loss {
                LossSection::SelectedEntropy => LossKind::SelectedEntropy,
                LossSection::Gce => LossKind::Gce { q: self.adapt.gce_q },
            },
            seed: self.adapt.seed,
        })
    }
}

/// Applies one `key.path=value` override onto a raw TOML tree. The value is
/// parsed as TOML when possible and falls back to a bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Validation(format!("override {spec:?} is not key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(HarnessError::Validation(format!("override {spec:?} has an empty key path")));
    }
    // Value syntax first (integers, floats, booleans, arrays, quoted
    // strings); a bare word falls back to a plain string.
    let parsed: toml::Value = raw_value
        .trim()
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw_value.trim().to_string()));

    let mut cursor = root;
    for seg in &segments[..segments.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| HarnessError::Validation(format!("override {spec:?} traverses a non-table")))?;
        cursor = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| HarnessError::Validation(format!("override {spec:?} traverses a non-table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}
