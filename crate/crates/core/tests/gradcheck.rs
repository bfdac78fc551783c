//! Finite-difference oracle checks for the adaptation objectives.
//!
//! The oracle re-evaluates the loss from scratch through a full forward pass
//! at perturbed parameters (selection mask held fixed), so it exercises the
//! entire differentiation path including batch-statistics coupling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tta_core::adapt::{
    gce_loss, gce_loss_grad_on_logits, loss_gradients, tta_loss, tta_loss_grad_on_logits,
    AdaptationConfig, LossKind,
};
use tta_core::nn::{self, ParamScope, SmallClassifier, StatsMode};
use tta_core::Mat;

fn random_batch(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(n, d);
    for v in m.data_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    m
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss evaluated from raw parameters: forward, softmax, objective.
fn eval_loss(
    model: &SmallClassifier,
    features: &Mat,
    mask: &[bool],
    c_o: &[usize],
    config: &AdaptationConfig,
) -> f64 {
    let (logits, _) = nn::forward(model, features).unwrap();
    let probs = nn::softmax(&logits).unwrap();
    match config.loss_kind {
        LossKind::SelectedEntropy => tta_loss(&probs, mask, config.lambda_max),
        LossKind::Gce { q } => {
            let mut v = gce_loss(&probs, c_o, mask, q);
            if config.lambda_max != 0.0 {
                let uniform_mask = vec![false; mask.len()];
                v += tta_loss(&probs, &uniform_mask, config.lambda_max);
            }
            v
        }
    }
}

fn check_instance(seed: u64, scope: ParamScope, loss_kind: LossKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3 + (seed % 3) as usize;
    let c = 2 + (seed % 2) as usize;
    let hidden = 4 + (seed % 4) as usize;
    let n = 3 + (seed % 4) as usize;
    let mut model = SmallClassifier::mlp(d, &[hidden], c, seed).unwrap();
    model.set_stats_mode(StatsMode::TestBatchStats);
    let features = random_batch(n, d, &mut rng);

    // Fixed mask and fixed original-model predictions for the check.
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
    let c_o: Vec<usize> = (0..n).map(|i| i % c).collect();
    let config = AdaptationConfig {
        scope,
        loss_kind: loss_kind.clone(),
        lambda_max: 0.5,
        ..AdaptationConfig::default()
    };

    let (logits, trace) = nn::forward(&model, &features).unwrap();
    let probs = nn::softmax(&logits).unwrap();
    let analytic = loss_gradients(&model, &trace, &probs, &c_o, &mask, &config)
        .unwrap()
        .flatten();

    let base = model.flatten_scope(scope);
    let step = 1e-4;
    for idx in 0..base.len() {
        let mut plus = base.clone();
        plus[idx] += step;
        let mut m_plus = model.clone();
        m_plus.assign_scope(scope, &plus).unwrap();
        let lp = eval_loss(&m_plus, &features, &mask, &c_o, &config);

        let mut minus = base.clone();
        minus[idx] -= step;
        let mut m_minus = model.clone();
        m_minus.assign_scope(scope, &minus).unwrap();
        let lm = eval_loss(&m_minus, &features, &mask, &c_o, &config);

        let numeric = (lp - lm) / (2.0 * step);
        assert!(
            rel_err(analytic[idx], numeric) < 1e-4,
            "seed {seed} {scope:?} {loss_kind:?} param {idx}: analytic {} vs numeric {numeric}",
            analytic[idx]
        );
    }
}

#[test]
fn selected_entropy_gradients_match_finite_differences() {
    for seed in 0..8u64 {
        check_instance(seed, ParamScope::AffineOnly, LossKind::SelectedEntropy);
        check_instance(seed, ParamScope::AllParams, LossKind::SelectedEntropy);
    }
}

#[test]
fn gce_gradients_match_finite_differences() {
    for seed in 0..6u64 {
        check_instance(seed * 7 + 1, ParamScope::AffineOnly, LossKind::Gce { q: 0.8 });
        check_instance(seed * 7 + 1, ParamScope::AllParams, LossKind::Gce { q: 0.8 });
    }
}

#[test]
fn empty_mask_zeroes_selected_entropy_gradient_path() {
    // With the mask all false, the objective reduces to the regularizer:
    // the gradient must equal the regularizer-only gradient, and a
    // finite-difference check of the regularizer-only loss must agree.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut model = SmallClassifier::mlp(4, &[5], 3, 42).unwrap();
    model.set_stats_mode(StatsMode::TestBatchStats);
    let features = random_batch(4, 4, &mut rng);
    let (logits, trace) = nn::forward(&model, &features).unwrap();
    let probs = nn::softmax(&logits).unwrap();

    let empty = vec![false; 4];
    let full = vec![true; 4];
    let scope = ParamScope::AffineOnly;

    let g_empty = tta_loss_grad_on_logits(&probs, &empty, 0.5);
    let g_full = tta_loss_grad_on_logits(&probs, &full, 0.5);
    let g_entropy_only = tta_loss_grad_on_logits(&probs, &full, 0.0);
    // Regularizer path is mask-independent; the entropy path vanished.
    for i in 0..4 {
        for k in 0..3 {
            let reconstructed = g_empty.get(i, k) + g_entropy_only.get(i, k);
            assert!((g_full.get(i, k) - reconstructed).abs() < 1e-12);
        }
    }

    let analytic = nn::backward(&model, &trace, &g_empty, scope).unwrap().flatten();
    let base = model.flatten_scope(scope);
    let step = 1e-4;
    for idx in 0..base.len() {
        let mut plus = base.clone();
        plus[idx] += step;
        let mut m_plus = model.clone();
        m_plus.assign_scope(scope, &plus).unwrap();
        let (lp_logits, _) = nn::forward(&m_plus, &features).unwrap();
        let lp = tta_loss(&nn::softmax(&lp_logits).unwrap(), &empty, 0.5);

        let mut minus = base.clone();
        minus[idx] -= step;
        let mut m_minus = model.clone();
        m_minus.assign_scope(scope, &minus).unwrap();
        let (lm_logits, _) = nn::forward(&m_minus, &features).unwrap();
        let lm = tta_loss(&nn::softmax(&lm_logits).unwrap(), &empty, 0.5);

        let numeric = (lp - lm) / (2.0 * step);
        assert!(rel_err(analytic[idx], numeric) < 1e-4);
    }
}

#[test]
fn gce_grad_reduces_to_cross_entropy_at_q_one() {
    // At q = 1 the GCE gradient on logits is -(onehot - p) / |S|, the
    // negative cross-entropy direction on the selected class.
    let probs = Mat::from_rows(&[vec![0.2, 0.5, 0.3]]);
    let g = gce_loss_grad_on_logits(&probs, &[1], &[true], 1.0);
    let expected = [0.2 * 0.5, -0.5 * 0.5, 0.3 * 0.5];
    // -p_c (delta - p_j) with p_c = 0.5.
    for (k, e) in expected.iter().enumerate() {
        assert!((g.get(0, k) - e).abs() < 1e-12, "{k}: {} vs {e}", g.get(0, k));
    }
}
