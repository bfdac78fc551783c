//! Evaluation and diagnostic computations over run records.
//!
//! All functions here are pure over immutable record collections. A sample
//! counts as *correct* when it is closed-set and the adapted model's online
//! prediction matched the label; open-set samples are noisy by definition.
//! Undefined quantities (empty denominators, empty pair groups) surface as
//! explicit `None` markers, never as silent zeros.

mod export;

pub use export::{write_series_csv, MetricValue, MetricsDoc, METRICS_VERSION};

use crate::adapt::{SampleRecord, StepRecord};
use crate::linalg::{dot, l2_norm};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricError {
    EmptyInput { context: String },
    SingleClass { context: String },
    Mismatch { context: String },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::EmptyInput { context } => write!(f, "empty input: {context}"),
            MetricError::SingleClass { context } => {
                write!(f, "need both positives and negatives: {context}")
            }
            MetricError::Mismatch { context } => write!(f, "input mismatch: {context}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Online error rate over the recorded (pre-update) predictions.
///
/// With `exclude_open` set, open-set samples do not count toward the
/// denominator, mirroring evaluation on closed-set samples only.
pub fn error_rate(records: &[StepRecord], exclude_open: bool) -> Result<f64, MetricError> {
    let mut total = 0usize;
    let mut wrong = 0usize;
    for s in records.iter().flat_map(|r| r.samples.iter()) {
        if exclude_open && s.open {
            continue;
        }
        total += 1;
        if s.open || s.c_a != s.label {
            wrong += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::EmptyInput { context: "no samples left after exclusion".into() });
    }
    Ok(wrong as f64 / total as f64)
}

/// Per-round online error rate (open-set samples excluded), keyed by round.
pub fn error_rate_by_round(records: &[StepRecord]) -> BTreeMap<usize, f64> {
    let mut totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = totals.entry(r.round_id).or_default();
        for s in &r.samples {
            if s.open {
                continue;
            }
            entry.0 += 1;
            if s.c_a != s.label {
                entry.1 += 1;
            }
        }
    }
    totals
        .into_iter()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(round, (n, wrong))| (round, wrong as f64 / n as f64))
        .collect()
}

/// Selection quality counts. Positives are the selected samples; the
/// relevant set is the correct closed-set samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// `tp / (tp + fp)`; `None` when nothing was selected.
    pub precision: Option<f64>,
    /// `tp / (tp + fn)`; `None` when nothing was correct.
    pub recall: Option<f64>,
}

pub fn selection_stats(records: &[StepRecord]) -> SelectionStats {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for s in records.iter().flat_map(|r| r.samples.iter()) {
        match (s.selected, s.correct()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
    let recall = if tp + fn_ > 0 { Some(tp as f64 / (tp + fn_) as f64) } else { None };
    SelectionStats { tp, fp, fn_, tn, precision, recall }
}

/// Per-sample scoring functions for separating correct from noisy samples.
/// Higher always means "more likely positive".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodScoreKind {
    /// Maximum softmax probability of the adapted model.
    Msp,
    /// Maximum raw logit of the adapted model.
    MaxLogit,
    /// Log-sum-exp of the logits. The classic energy score is its negation;
    /// the sign here is flipped so all four kinds share one orientation.
    Energy,
    /// Confidence difference on the originally predicted class.
    ConfDiff,
}

impl OodScoreKind {
    pub const ALL: [OodScoreKind; 4] =
        [OodScoreKind::Msp, OodScoreKind::MaxLogit, OodScoreKind::Energy, OodScoreKind::ConfDiff];

    pub fn name(&self) -> &'static str {
        match self {
            OodScoreKind::Msp => "msp",
            OodScoreKind::MaxLogit => "max_logit",
            OodScoreKind::Energy => "energy",
            OodScoreKind::ConfDiff => "conf_diff",
        }
    }
}

/// Scores one sample from its raw per-class outputs.
pub fn ood_score(
    kind: OodScoreKind,
    logits: &[f64],
    probs: &[f64],
    conf_tilde: f64,
    conf_hat: f64,
) -> f64 {
    match kind {
        OodScoreKind::Msp => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        OodScoreKind::MaxLogit => logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        OodScoreKind::Energy => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        }
        OodScoreKind::ConfDiff => conf_hat - conf_tilde,
    }
}

/// Scores one stored sample record.
pub fn sample_score(kind: OodScoreKind, s: &SampleRecord) -> f64 {
    match kind {
        OodScoreKind::Msp => s.msp,
        OodScoreKind::MaxLogit => s.max_logit,
        OodScoreKind::Energy => s.energy,
        OodScoreKind::ConfDiff => s.conf_diff(),
    }
}

/// AUROC as the Mann-Whitney statistic `P(pos > neg) + 0.5 P(pos = neg)`.
///
/// Computed by integer pair counting over sorted score lists, so it matches
/// the brute-force pairwise comparison bit for bit.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != positive.len() {
        return Err(MetricError::Mismatch { context: "scores and flags differ in length".into() });
    }
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&s, &p) in scores.iter().zip(positive) {
        if p {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::SingleClass {
            context: format!("{} positives, {} negatives", pos.len(), neg.len()),
        });
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    // For each negative, count positives strictly above and exactly equal
    // with a two-pointer sweep over the sorted positives.
    let mut greater: u64 = 0;
    let mut ties: u64 = 0;
    let mut lo = 0usize; // first positive >= current negative
    let mut hi = 0usize; // first positive > current negative
    for &nv in &neg {
        while lo < pos.len() && pos[lo] < nv {
            lo += 1;
        }
        while hi < pos.len() && pos[hi] <= nv {
            hi += 1;
        }
        greater += (pos.len() - hi) as u64;
        ties += (hi - lo) as u64;
    }
    let pairs = (pos.len() as u64) * (neg.len() as u64);
    Ok((greater as f64 + 0.5 * ties as f64) / pairs as f64)
}

/// False-positive rate at the largest score threshold whose true-positive
/// rate reaches `tpr_target`. A sample is called positive when its score is
/// `>=` the threshold, so tied scores land on the same side; thresholds are
/// swept over the observed scores from high to low.
pub fn fpr_at_tpr(scores: &[f64], positive: &[bool], tpr_target: f64) -> Result<f64, MetricError> {
    if scores.len() != positive.len() {
        return Err(MetricError::Mismatch { context: "scores and flags differ in length".into() });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass {
            context: format!("{n_pos} positives, {n_neg} negatives"),
        });
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // High to low: the first admitting threshold is the largest one.
    for &t in thresholds.iter().rev() {
        let tp = scores.iter().zip(positive).filter(|(&s, &p)| p && s >= t).count();
        let tpr = tp as f64 / n_pos as f64;
        if tpr >= tpr_target {
            let fp = scores.iter().zip(positive).filter(|(&s, &p)| !p && s >= t).count();
            return Ok(fp as f64 / n_neg as f64);
        }
    }
    // The lowest observed threshold admits everything: TPR = 1 >= target.
    Ok(1.0)
}

/// Which samples count as negatives when evaluating a separation score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativesMode {
    /// Noisy = wrong closed-set + open-set.
    IncludeClosedWrong,
    /// Noisy = open-set only; wrong closed-set samples are dropped entirely.
    ExcludeClosedWrong,
}

/// AUROC and FPR@TPR95 of a score kind over the records, with correct
/// closed-set samples as positives.
pub fn ood_eval(
    records: &[StepRecord],
    kind: OodScoreKind,
    mode: NegativesMode,
) -> Result<(f64, f64), MetricError> {
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    for s in records.iter().flat_map(|r| r.samples.iter()) {
        let is_positive = s.correct();
        if !is_positive && mode == NegativesMode::ExcludeClosedWrong && !s.open {
            continue;
        }
        scores.push(sample_score(kind, s));
        positive.push(is_positive);
    }
    if scores.is_empty() {
        return Err(MetricError::EmptyInput { context: "no samples for separation metric".into() });
    }
    let a = auroc(&scores, &positive)?;
    let f = fpr_at_tpr(&scores, &positive, 0.95)?;
    Ok((a, f))
}

/// One round's decreased-confidence statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDrop {
    pub round_id: usize,
    /// Samples whose confidence on the originally predicted class dropped.
    pub count: usize,
    /// Among those, the fraction whose original prediction was wrong
    /// (open-set samples are wrong by definition). `None` with zero drops.
    pub wrong_fraction: Option<f64>,
}

/// Per-round decreased-confidence series.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfidenceDropStats {
    pub per_round: Vec<RoundDrop>,
}

pub fn confidence_drop_stats(records: &[StepRecord]) -> ConfidenceDropStats {
    let mut rounds: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = rounds.entry(r.round_id).or_default();
        for s in &r.samples {
            if s.conf_hat < s.conf_tilde {
                entry.0 += 1;
                if s.open || s.c_o != s.label {
                    entry.1 += 1;
                }
            }
        }
    }
    ConfidenceDropStats {
        per_round: rounds
            .into_iter()
            .map(|(round_id, (count, wrong))| RoundDrop {
                round_id,
                count,
                wrong_fraction: if count > 0 { Some(wrong as f64 / count as f64) } else { None },
            })
            .collect(),
    }
}

/// Class-pair gradient cosine-similarity matrix.
///
/// Cell `(j, i)` averages the cosine similarity between gradients of samples
/// with ground truth `j` predicted as `i` and gradients of correct samples
/// of class `i`; self-pairs are excluded on the diagonal. Cells with no
/// contributing pairs are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSimMatrix {
    num_classes: usize,
    cells: Vec<Option<f64>>,
    counts: Vec<u64>,
    /// Samples dropped for having a zero-norm gradient.
    pub zero_norm_excluded: usize,
}

impl GradSimMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell(&self, truth: usize, predicted: usize) -> Option<f64> {
        self.cells[truth * self.num_classes + predicted]
    }

    pub fn pair_count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    /// Mean over defined diagonal cells.
    pub fn diag_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.num_classes).filter_map(|i| self.cell(i, i)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean over defined off-diagonal cells.
    pub fn offdiag_mean(&self) -> Option<f64> {
        let mut vals = Vec::new();
        for j in 0..self.num_classes {
            for i in 0..self.num_classes {
                if j != i {
                    if let Some(v) = self.cell(j, i) {
                        vals.push(v);
                    }
                }
            }
        }
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.num_classes)
            .map(|j| (0..self.num_classes).map(|i| self.cell(j, i)).collect())
            .collect()
    }
}

/// Builds the gradient cosine-similarity matrix from per-sample gradient
/// vectors and their ground-truth/predicted labels.
///
/// Labels must lie in `[0, num_classes)`; zero-norm gradient vectors are
/// excluded from every group and counted.
pub fn grad_cos_sim(
    grads: &[Vec<f64>],
    truths: &[usize],
    preds: &[usize],
    num_classes: usize,
) -> Result<GradSimMatrix, MetricError> {
    if grads.len() != truths.len() || grads.len() != preds.len() {
        return Err(MetricError::Mismatch { context: "gradients and labels differ in length".into() });
    }
    let dim = grads.first().map(|g| g.len()).unwrap_or(0);
    if grads.iter().any(|g| g.len() != dim) {
        return Err(MetricError::Mismatch { context: "gradient vectors differ in length".into() });
    }
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= num_classes || p >= num_classes {
            return Err(MetricError::Mismatch {
                context: format!("label out of range for {num_classes} classes"),
            });
        }
    }

    let mut zero_norm_excluded = 0usize;
    let mut norms = Vec::with_capacity(grads.len());
    let mut usable = Vec::with_capacity(grads.len());
    for g in grads {
        let n = l2_norm(g);
        usable.push(n > 0.0);
        if n == 0.0 {
            zero_norm_excluded += 1;
        }
        norms.push(n);
    }

    // Group sample indices by (truth, pred).
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_classes * num_classes];
    for i in 0..grads.len() {
        if usable[i] {
            groups[truths[i] * num_classes + preds[i]].push(i);
        }
    }

    let mut cells = vec![None; num_classes * num_classes];
    let mut counts = vec![0u64; num_classes * num_classes];
    for j in 0..num_classes {
        for i in 0..num_classes {
            let group_ji = &groups[j * num_classes + i];
            let group_ii = &groups[i * num_classes + i];
            let mut sum = 0.0;
            let mut pairs = 0u64;
            for &k in group_ji {
                for &l in group_ii {
                    if j == i && k == l {
                        continue;
                    }
                    sum += dot(&grads[k], &grads[l]) / (norms[k] * norms[l]);
                    pairs += 1;
                }
            }
            counts[j * num_classes + i] = pairs;
            if pairs > 0 {
                cells[j * num_classes + i] = Some(sum / pairs as f64);
            }
        }
    }

    Ok(GradSimMatrix { num_classes, cells, counts, zero_norm_excluded })
}

/// Spearman rank correlation between two equal-length sequences.
/// Average ranks are assigned to ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::Mismatch { context: "sequences differ in length".into() });
    }
    if xs.len() < 2 {
        return Err(MetricError::EmptyInput { context: "need at least 2 points".into() });
    }
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vs.len()).collect();
        order.sort_by(|&a, &b| vs[a].total_cmp(&vs[b]));
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vs[order[j + 1]] == vs[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(MetricError::EmptyInput { context: "constant sequence has no rank ordering".into() });
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}
