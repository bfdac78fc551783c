//! Forward pass, softmax/entropy, and the exact reverse pass.

use crate::linalg::Mat;
use crate::nn::{
    Activation, ForwardTrace, GradientSet, LayerGrads, LayerTrace, NnError, ParamScope,
    SmallClassifier, StatsMode, LOG_FLOOR,
};

/// Runs the model on a batch of feature rows and returns the logits along
/// with a trace sufficient for an exact reverse pass.
///
/// Under `TestBatchStats` the batch must have at least two rows so the batch
/// variance is defined; normalization uses the biased (1/n) variance and the
/// running statistics are left untouched.
pub fn forward(model: &SmallClassifier, features: &Mat) -> Result<(Mat, ForwardTrace), NnError> {
    let n = features.rows();
    if features.cols() != model.input_dim() {
        return Err(NnError::DimensionMismatch {
            context: "feature dimension",
            expected: model.input_dim(),
            got: features.cols(),
        });
    }
    if n == 0 {
        return Err(NnError::BatchTooSmall { n });
    }
    if model.any_test_batch_stats() && n < 2 {
        return Err(NnError::BatchTooSmall { n });
    }
    if !features.is_finite() {
        return Err(NnError::NonFinite { context: "features" });
    }

    let mut traces = Vec::with_capacity(model.layers().len());
    let mut current = features.clone();
    for layer in model.layers() {
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        // pre_bn = current * W^T + b
        let mut pre_bn = Mat::zeros(n, out_dim);
        for i in 0..n {
            let x = current.row(i);
            let z = pre_bn.row_mut(i);
            for (o, zo) in z.iter_mut().enumerate() {
                let w = layer.weight.row(o);
                let mut acc = layer.bias[o];
                for k in 0..in_dim {
                    acc += w[k] * x[k];
                }
                *zo = acc;
            }
        }

        let (mean, var) = match layer.bn.stats_mode {
            StatsMode::SourceStats => (layer.bn.running_mean.clone(), layer.bn.running_var.clone()),
            StatsMode::TestBatchStats => {
                let mut mean = vec![0.0; out_dim];
                let mut var = vec![0.0; out_dim];
                for i in 0..n {
                    let z = pre_bn.row(i);
                    for k in 0..out_dim {
                        mean[k] += z[k];
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for i in 0..n {
                    let z = pre_bn.row(i);
                    for k in 0..out_dim {
                        let d = z[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                (mean, var)
            }
        };

        let mut normalized = Mat::zeros(n, out_dim);
        let mut pre_act = Mat::zeros(n, out_dim);
        let mut output = Mat::zeros(n, out_dim);
        for i in 0..n {
            for k in 0..out_dim {
                let inv_std = 1.0 / (var[k] + layer.bn.eps).sqrt();
                let xh = (pre_bn.get(i, k) - mean[k]) * inv_std;
                normalized.set(i, k, xh);
                let a = layer.bn.gamma[k] * xh + layer.bn.beta[k];
                pre_act.set(i, k, a);
                let y = match layer.activation {
                    Activation::Relu => a.max(0.0),
                    Activation::Identity => a,
                };
                output.set(i, k, y);
            }
        }

        let next = output.clone();
        traces.push(LayerTrace {
            input: current,
            pre_bn,
            mean,
            var,
            normalized,
            pre_act,
            output,
        });
        current = next;
    }

    if !current.is_finite() {
        return Err(NnError::NonFinite { context: "logits" });
    }
    Ok((current, ForwardTrace { layers: traces, batch_size: n }))
}

/// Row-wise softmax with max-subtraction for numerical stability.
pub fn softmax(logits: &Mat) -> Result<Mat, NnError> {
    if !logits.is_finite() {
        return Err(NnError::NonFinite { context: "softmax input" });
    }
    let mut probs = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = probs.row_mut(i);
        let mut sum = 0.0;
        for (k, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[k] = e;
            sum += e;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    Ok(probs)
}

/// Shannon entropy `-sum p ln p` of a validated probability vector.
///
/// `0 * ln 0` is defined as 0. Rejects negative entries and vectors whose
/// sum deviates from 1 by more than 1e-6.
pub fn entropy(probs: &[f64]) -> Result<f64, NnError> {
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(NnError::InvalidProbability {
                context: format!("entry {p} is negative or non-finite"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NnError::InvalidProbability {
            context: format!("entries sum to {sum}, expected 1"),
        });
    }
    Ok(entropy_unchecked(probs))
}

/// Entropy without validation, for internal hot paths where the input comes
/// straight out of [`softmax`].
pub fn entropy_unchecked(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.max(LOG_FLOOR).ln();
        }
    }
    h
}

/// Exact reverse pass for `sum_{i,k} upstream[i][k] * logits[i][k]`.
///
/// Only parameters in `scope` receive gradient blocks. In `TestBatchStats`
/// mode the batch mean/variance are differentiated through, so gradients are
/// exact for the graph the forward pass actually computed.
pub fn backward(
    model: &SmallClassifier,
    trace: &ForwardTrace,
    upstream: &Mat,
    scope: ParamScope,
) -> Result<GradientSet, NnError> {
    let n = trace.batch_size;
    if trace.layers.len() != model.layers().len() {
        return Err(NnError::TraceMismatch { context: "layer count" });
    }
    let last = trace
        .layers
        .last()
        .ok_or(NnError::TraceMismatch { context: "empty trace" })?;
    if upstream.rows() != n || upstream.cols() != model.num_classes() || last.output.cols() != model.num_classes() {
        return Err(NnError::TraceMismatch { context: "upstream gradient shape" });
    }
    if !upstream.is_finite() {
        return Err(NnError::NonFinite { context: "upstream gradient" });
    }

    let mut grads: Vec<LayerGrads> = Vec::with_capacity(model.layers().len());
    let mut d_output = upstream.clone();

    for (layer, lt) in model.layers().iter().zip(&trace.layers).rev() {
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        if lt.output.cols() != out_dim || lt.input.cols() != in_dim || lt.input.rows() != n {
            return Err(NnError::TraceMismatch { context: "layer trace shape" });
        }

        // Activation.
        let mut d_pre_act = d_output;
        if layer.activation == Activation::Relu {
            for i in 0..n {
                for k in 0..out_dim {
                    if lt.pre_act.get(i, k) <= 0.0 {
                        d_pre_act.set(i, k, 0.0);
                    }
                }
            }
        }

        // Affine transform.
        let mut d_gamma = vec![0.0; out_dim];
        let mut d_beta = vec![0.0; out_dim];
        let mut d_norm = Mat::zeros(n, out_dim);
        for i in 0..n {
            for k in 0..out_dim {
                let g = d_pre_act.get(i, k);
                d_gamma[k] += g * lt.normalized.get(i, k);
                d_beta[k] += g;
                d_norm.set(i, k, g * layer.bn.gamma[k]);
            }
        }

        // Normalization.
        let mut d_pre_bn = Mat::zeros(n, out_dim);
        match layer.bn.stats_mode {
            StatsMode::SourceStats => {
                for k in 0..out_dim {
                    let inv_std = 1.0 / (lt.var[k] + layer.bn.eps).sqrt();
                    for i in 0..n {
                        d_pre_bn.set(i, k, d_norm.get(i, k) * inv_std);
                    }
                }
            }
            StatsMode::TestBatchStats => {
                let nf = n as f64;
                for k in 0..out_dim {
                    let inv_std = 1.0 / (lt.var[k] + layer.bn.eps).sqrt();
                    let mut d_var = 0.0;
                    let mut centered_sum = 0.0;
                    for i in 0..n {
                        let centered = lt.pre_bn.get(i, k) - lt.mean[k];
                        centered_sum += centered;
                        d_var += d_norm.get(i, k) * centered;
                    }
                    d_var *= -0.5 * inv_std * inv_std * inv_std;
                    let mut d_mean = 0.0;
                    for i in 0..n {
                        d_mean -= d_norm.get(i, k) * inv_std;
                    }
                    d_mean += d_var * (-2.0 / nf) * centered_sum;
                    for i in 0..n {
                        let centered = lt.pre_bn.get(i, k) - lt.mean[k];
                        let dx = d_norm.get(i, k) * inv_std + d_var * 2.0 * centered / nf + d_mean / nf;
                        d_pre_bn.set(i, k, dx);
                    }
                }
            }
        }

        // Linear transform.
        let (d_weight, d_bias) = if scope == ParamScope::AllParams {
            let mut dw = Mat::zeros(out_dim, in_dim);
            let mut db = vec![0.0; out_dim];
            for i in 0..n {
                let x = lt.input.row(i);
                let dz = d_pre_bn.row(i);
                for (o, &dzo) in dz.iter().enumerate() {
                    db[o] += dzo;
                    let wrow = dw.row_mut(o);
                    for k in 0..in_dim {
                        wrow[k] += dzo * x[k];
                    }
                }
            }
            (Some(dw), Some(db))
        } else {
            (None, None)
        };

        let mut d_input = Mat::zeros(n, in_dim);
        for i in 0..n {
            let dz = d_pre_bn.row(i);
            let dx = d_input.row_mut(i);
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo != 0.0 {
                    let w = layer.weight.row(o);
                    for k in 0..in_dim {
                        dx[k] += dzo * w[k];
                    }
                }
            }
        }

        grads.push(LayerGrads { weight: d_weight, bias: d_bias, gamma: d_gamma, beta: d_beta });
        d_output = d_input;
    }

    grads.reverse();
    Ok(GradientSet { scope, layers: grads })
}

/// Gradient of the entropy of `softmax(z)` with respect to the logits `z`:
/// `dH/dz_j = -p_j (ln p_j + H)`.
pub(crate) fn entropy_grad_on_logits(probs_row: &[f64]) -> Vec<f64> {
    let h = entropy_unchecked(probs_row);
    probs_row
        .iter()
        .map(|&p| {
            if p > 0.0 {
                -p * (p.max(LOG_FLOOR).ln() + h)
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-sample entropy gradients: for each row of the batch, the gradient of
/// that row's prediction entropy with respect to the parameters in `scope`,
/// flattened in canonical order.
///
/// Each sample is back-propagated independently, but batch normalization
/// statistics come from the full containing batch, so a sample's gradient
/// includes its coupling to the rest of the batch through those statistics.
pub fn per_sample_gradients(
    model: &SmallClassifier,
    features: &Mat,
    scope: ParamScope,
) -> Result<Vec<Vec<f64>>, NnError> {
    let (logits, trace) = forward(model, features)?;
    let probs = softmax(&logits)?;
    let n = features.rows();
    let c = model.num_classes();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut upstream = Mat::zeros(n, c);
        let grad_row = entropy_grad_on_logits(probs.row(i));
        upstream.row_mut(i).copy_from_slice(&grad_row);
        let grads = backward(model, &trace, &upstream, scope)?;
        out.push(grads.flatten());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNormState;
    use crate::nn::LayerBlock;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(n, d);
        for v in m.data_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        m
    }

    fn identity_model(dim: usize) -> SmallClassifier {
        let mut w = Mat::zeros(dim, dim);
        for k in 0..dim {
            w.set(k, k, 1.0);
        }
        let layer = LayerBlock {
            weight: w,
            bias: vec![0.0; dim],
            bn: BatchNormState::identity(dim),
            activation: Activation::Identity,
        };
        SmallClassifier::new(vec![layer], dim, dim).unwrap()
    }

    #[test]
    fn identity_model_passes_input_through() {
        // weight = I, bias = 0, gamma = 1, beta = 0, SourceStats with
        // running_mean = 0 and running_var = 1 composes (almost) to the
        // identity; eps makes it 1/sqrt(1+eps), negligible at 1e-5.
        let model = identity_model(2);
        let input = Mat::from_rows(&[vec![1.0, 0.0]]);
        let (logits, _) = forward(&model, &input).unwrap();
        assert!((logits.get(0, 0) - 1.0).abs() < 1e-5);
        assert!(logits.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_identical_logits_under_batch_stats() {
        let mut model = SmallClassifier::mlp(4, &[6], 3, 3).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let row = vec![0.3, -1.2, 0.8, 0.05];
        let features = Mat::from_rows(&[row.clone(), vec![1.0, 2.0, -0.5, 0.2], row.clone()]);
        let (logits, _) = forward(&model, &features).unwrap();
        assert_eq!(logits.row(0), logits.row(2));
    }

    #[test]
    fn forward_matches_independent_reevaluation() {
        // Straight-line re-implementation of the same arithmetic for a fixed
        // seed-7 two-layer model, kept deliberately separate from the
        // library's forward code.
        let model = SmallClassifier::mlp(3, &[4], 2, 7).unwrap();
        let features = random_batch(5, 3, 70);
        let (logits, _) = forward(&model, &features).unwrap();

        for i in 0..5 {
            let x = features.row(i);
            // layer 0
            let l0 = &model.layers()[0];
            let mut h = vec![0.0; 4];
            for o in 0..4 {
                let mut z = l0.bias[o];
                for k in 0..3 {
                    z += l0.weight.get(o, k) * x[k];
                }
                let xh = (z - l0.bn.running_mean[o]) / (l0.bn.running_var[o] + l0.bn.eps).sqrt();
                let a = l0.bn.gamma[o] * xh + l0.bn.beta[o];
                h[o] = if a > 0.0 { a } else { 0.0 };
            }
            // layer 1
            let l1 = &model.layers()[1];
            for o in 0..2 {
                let mut z = l1.bias[o];
                for (k, hk) in h.iter().enumerate() {
                    z += l1.weight.get(o, k) * hk;
                }
                let xh = (z - l1.bn.running_mean[o]) / (l1.bn.running_var[o] + l1.bn.eps).sqrt();
                let a = l1.bn.gamma[o] * xh + l1.bn.beta[o];
                assert!(
                    (a - logits.get(i, o)).abs() < 1e-10,
                    "row {i} class {o}: {} vs {}",
                    a,
                    logits.get(i, o)
                );
            }
        }
    }

    #[test]
    fn forward_rejects_small_batch_under_batch_stats() {
        let mut model = SmallClassifier::mlp(3, &[4], 2, 7).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(1, 3, 1);
        assert!(matches!(
            forward(&model, &features),
            Err(NnError::BatchTooSmall { n: 1 })
        ));
    }

    #[test]
    fn forward_rejects_dimension_mismatch_and_nonfinite() {
        let model = SmallClassifier::mlp(3, &[4], 2, 7).unwrap();
        let features = random_batch(2, 5, 1);
        assert!(matches!(
            forward(&model, &features),
            Err(NnError::DimensionMismatch { .. })
        ));
        let mut bad = random_batch(2, 3, 1);
        bad.set(0, 0, f64::NAN);
        assert!(matches!(forward(&model, &bad), Err(NnError::NonFinite { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut model = SmallClassifier::mlp(6, &[8, 8], 4, 11).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(7, 6, 5);
        let (a, _) = forward(&model, &features).unwrap();
        let (b, _) = forward(&model, &features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_batch_stats_absorbs_input_shift() {
        let mut model = SmallClassifier::mlp(4, &[6], 3, 13).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(8, 4, 21);
        let (base, _) = forward(&model, &features).unwrap();
        let mut shifted = features.clone();
        let delta = [3.0, -1.5, 0.25, 10.0];
        for i in 0..8 {
            for k in 0..4 {
                let v = shifted.get(i, k) + delta[k];
                shifted.set(i, k, v);
            }
        }
        let (moved, _) = forward(&model, &shifted).unwrap();
        for i in 0..8 {
            for k in 0..3 {
                assert!(
                    (base.get(i, k) - moved.get(i, k)).abs() < 1e-8,
                    "shift leaked through batch normalization"
                );
            }
        }
    }

    #[test]
    fn softmax_known_values() {
        let m = Mat::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]);
        let p = softmax(&m).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.5).abs() < 1e-12);
        assert!(p.get(1, 0) > 1.0 - 1e-12 && p.get(1, 0) <= 1.0);
        assert!(p.get(1, 1) >= 0.0 && p.get(1, 1) < 1e-12);
        assert!(p.is_finite());

        // Frozen from a direct extended-precision evaluation of exp/sum.
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let p = softmax(&m).unwrap();
        for (got, want) in p.row(0).iter().zip([0.0900305731, 0.2447284710, 0.6652409557]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_nonfinite() {
        let m = Mat::from_rows(&[vec![f64::INFINITY, 0.0]]);
        assert!(matches!(softmax(&m), Err(NnError::NonFinite { .. })));
    }

    #[test]
    fn entropy_known_values() {
        // uniform over 10 classes
        let u = vec![0.1; 10];
        assert!((entropy(&u).unwrap() - 2.3025850929).abs() < 1e-9);
        // one-hot
        let onehot = vec![0.0, 1.0, 0.0];
        assert_eq!(entropy(&onehot).unwrap(), 0.0);
        // frozen from direct evaluation of -sum p ln p
        assert!((entropy(&[0.9, 0.1]).unwrap() - 0.3250829734).abs() < 1e-9);
    }

    #[test]
    fn entropy_rejects_invalid() {
        assert!(matches!(
            entropy(&[-0.1, 1.1]),
            Err(NnError::InvalidProbability { .. })
        ));
        assert!(matches!(
            entropy(&[0.6, 0.6]),
            Err(NnError::InvalidProbability { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut model = SmallClassifier::mlp(3, &[5], 2, 3).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(4, 3, 8);
        let (_, trace) = forward(&model, &features).unwrap();
        let upstream = Mat::zeros(4, 2);
        for scope in [ParamScope::AffineOnly, ParamScope::AllParams] {
            let g = backward(&model, &trace, &upstream, scope).unwrap();
            assert!(g.is_all_zero());
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let model = SmallClassifier::mlp(3, &[5], 2, 3).unwrap();
        let other = SmallClassifier::mlp(3, &[7], 2, 3).unwrap();
        let features = random_batch(4, 3, 8);
        let (_, trace) = forward(&other, &features).unwrap();
        let upstream = Mat::zeros(4, 2);
        assert!(backward(&model, &trace, &upstream, ParamScope::AllParams).is_err());
    }

    /// Central finite differences of an arbitrary scalar loss on the logits.
    fn finite_diff(
        model: &SmallClassifier,
        features: &Mat,
        scope: ParamScope,
        loss: &dyn Fn(&Mat) -> f64,
        step: f64,
    ) -> Vec<f64> {
        let base = model.flatten_scope(scope);
        let mut grads = Vec::with_capacity(base.len());
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus[idx] += step;
            let mut m_plus = model.clone();
            m_plus.assign_scope(scope, &plus).unwrap();
            let (lp, _) = forward(&m_plus, features).unwrap();

            let mut minus = base.clone();
            minus[idx] -= step;
            let mut m_minus = model.clone();
            m_minus.assign_scope(scope, &minus).unwrap();
            let (lm, _) = forward(&m_minus, features).unwrap();

            grads.push((loss(&lp) - loss(&lm)) / (2.0 * step));
        }
        grads
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences_single_sample_affine() {
        // Mean prediction entropy of the batch as the scalar loss.
        let mut model = SmallClassifier::mlp(4, &[6], 3, 17).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(3, 4, 29);
        let loss = |logits: &Mat| {
            let p = softmax(logits).unwrap();
            (0..p.rows()).map(|i| entropy_unchecked(p.row(i))).sum::<f64>() / p.rows() as f64
        };
        let (logits, trace) = forward(&model, &features).unwrap();
        let probs = softmax(&logits).unwrap();
        let n = features.rows();
        let mut upstream = Mat::zeros(n, 3);
        for i in 0..n {
            let row = entropy_grad_on_logits(probs.row(i));
            for (k, v) in row.iter().enumerate() {
                upstream.set(i, k, v / n as f64);
            }
        }
        let scope = ParamScope::AffineOnly;
        let analytic = backward(&model, &trace, &upstream, scope).unwrap().flatten();
        let numeric = finite_diff(&model, &features, scope, &loss, 1e-4);
        for (a, nmr) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *nmr) < 1e-4, "analytic {a} vs numeric {nmr}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_params_both_modes() {
        for (seed, mode) in [(5u64, StatsMode::SourceStats), (6, StatsMode::TestBatchStats)] {
            let mut model = SmallClassifier::mlp(3, &[5], 3, seed).unwrap();
            model.set_stats_mode(mode);
            let features = random_batch(4, 3, seed + 100);
            let loss = |logits: &Mat| {
                let p = softmax(logits).unwrap();
                (0..p.rows()).map(|i| entropy_unchecked(p.row(i))).sum::<f64>() / p.rows() as f64
            };
            let (logits, trace) = forward(&model, &features).unwrap();
            let probs = softmax(&logits).unwrap();
            let n = features.rows();
            let mut upstream = Mat::zeros(n, 3);
            for i in 0..n {
                let row = entropy_grad_on_logits(probs.row(i));
                for (k, v) in row.iter().enumerate() {
                    upstream.set(i, k, v / n as f64);
                }
            }
            let scope = ParamScope::AllParams;
            let analytic = backward(&model, &trace, &upstream, scope).unwrap().flatten();
            let numeric = finite_diff(&model, &features, scope, &loss, 1e-4);
            for (a, nmr) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *nmr) < 1e-4, "mode {mode:?}: analytic {a} vs numeric {nmr}");
            }
        }
    }

    #[test]
    fn per_sample_gradients_duplicate_sample_identical() {
        let mut model = SmallClassifier::mlp(3, &[4], 2, 2).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let mut features = random_batch(3, 3, 9);
        let dup: Vec<f64> = features.row(0).to_vec();
        features.row_mut(2).copy_from_slice(&dup);
        let grads = per_sample_gradients(&model, &features, ParamScope::AffineOnly).unwrap();
        assert_eq!(grads[0], grads[2]);
    }

    #[test]
    fn per_sample_gradients_sum_matches_batch_mean_gradient() {
        let mut model = SmallClassifier::mlp(4, &[6], 3, 31).unwrap();
        model.set_stats_mode(StatsMode::TestBatchStats);
        let features = random_batch(5, 4, 77);
        let scope = ParamScope::AllParams;
        let per_sample = per_sample_gradients(&model, &features, scope).unwrap();
        assert_eq!(per_sample.len(), 5);
        assert_eq!(per_sample[0].len(), model.param_count(scope));

        let (logits, trace) = forward(&model, &features).unwrap();
        let probs = softmax(&logits).unwrap();
        let mut upstream = Mat::zeros(5, 3);
        for i in 0..5 {
            let row = entropy_grad_on_logits(probs.row(i));
            for (k, v) in row.iter().enumerate() {
                upstream.set(i, k, v / 5.0);
            }
        }
        let mean_grad = backward(&model, &trace, &upstream, scope).unwrap().flatten();
        for idx in 0..mean_grad.len() {
            let sum: f64 = per_sample.iter().map(|g| g[idx]).sum();
            assert!(
                (sum - 5.0 * mean_grad[idx]).abs() < 1e-8,
                "linearity violated at {idx}: {sum} vs {}",
                5.0 * mean_grad[idx]
            );
        }
    }

    #[test]
    fn near_one_hot_prediction_has_near_zero_entropy_gradient() {
        // Drive one logit far above the rest so max prob >= 0.9999; the
        // entropy is near its vertex minimum and the per-sample gradient
        // norm collapses toward zero.
        let model = identity_model(3);
        let features = Mat::from_rows(&[vec![16.0, 0.0, 0.0], vec![0.0, 0.3, 0.1]]);
        let (logits, _) = forward(&model, &features).unwrap();
        let probs = softmax(&logits).unwrap();
        assert!(probs.row(0).iter().cloned().fold(0.0, f64::max) >= 0.9999);
        let grads = per_sample_gradients(&model, &features, ParamScope::AllParams).unwrap();
        let norm = crate::linalg::l2_norm(&grads[0]);
        assert!(norm < 1e-3, "gradient norm {norm} not near zero");
        // The soft second sample keeps a clearly nonzero gradient.
        assert!(crate::linalg::l2_norm(&grads[1]) > 1e-2);
    }
}
