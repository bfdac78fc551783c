//! Property tests for the numeric invariants.

use proptest::prelude::*;
use tta_core::adapt::{select, PairPrediction, SelectionStrategy};
use tta_core::metrics::{auroc, fpr_at_tpr};
use tta_core::nn::{entropy, softmax};
use tta_core::Mat;

/// Brute-force pairwise AUROC: P(pos > neg) + 0.5 P(tie).
fn auroc_brute_force(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut greater = 0u64;
    let mut ties = 0u64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                greater += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    Some((greater as f64 + 0.5 * ties as f64) / (pos.len() * neg.len()) as f64)
}

/// Brute-force threshold sweep for FPR at the given TPR target.
fn fpr_brute_force(scores: &[f64], positive: &[bool], tpr_target: f64) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None; // (threshold, fpr)
    for &t in scores {
        let tp = scores.iter().zip(positive).filter(|(&s, &p)| p && s >= t).count();
        if tp as f64 / n_pos as f64 >= tpr_target {
            let fp = scores.iter().zip(positive).filter(|(&s, &p)| !p && s >= t).count();
            let fpr = fp as f64 / n_neg as f64;
            match best {
                Some((bt, _)) if bt >= t => {}
                _ => best = Some((t, fpr)),
            }
        }
    }
    best.map(|(_, f)| f)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_entropy_bounded(
        rows in prop::collection::vec(
            prop::collection::vec(-30.0f64..30.0, 2..8), 1..6
        )
    ) {
        let cols = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
        let logits = Mat::from_rows(&rows);
        let probs = softmax(&logits).unwrap();
        let ln_c = (cols as f64).ln();
        for i in 0..probs.rows() {
            let sum: f64 = probs.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            // Extreme logit gaps saturate to exactly 0/1 in f64; the open
            // interval only holds for moderate rows.
            prop_assert!(probs.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            let h = entropy(probs.row(i)).unwrap();
            prop_assert!((-1e-12..=ln_c + 1e-9).contains(&h));
        }
    }

    #[test]
    fn auroc_matches_brute_force(
        scores in prop::collection::vec(-5.0f64..5.0, 2..50),
        flags in prop::collection::vec(any::<bool>(), 2..50),
        quantize in any::<bool>(),
    ) {
        let n = scores.len().min(flags.len());
        // Quantized scores force ties through the tie-handling path.
        let scores: Vec<f64> = scores[..n]
            .iter()
            .map(|&s| if quantize { (s * 4.0).round() / 4.0 } else { s })
            .collect();
        let flags = &flags[..n];
        match auroc_brute_force(&scores, flags) {
            Some(expected) => {
                let got = auroc(&scores, flags).unwrap();
                prop_assert_eq!(got, expected);
            }
            None => prop_assert!(auroc(&scores, flags).is_err()),
        }
    }

    #[test]
    fn fpr_at_tpr_matches_threshold_sweep(
        scores in prop::collection::vec(-5.0f64..5.0, 2..50),
        flags in prop::collection::vec(any::<bool>(), 2..50),
        target in 0.5f64..1.0,
    ) {
        let n = scores.len().min(flags.len());
        let scores = &scores[..n];
        let flags = &flags[..n];
        match fpr_brute_force(scores, flags, target) {
            Some(expected) => {
                let got = fpr_at_tpr(scores, flags, target).unwrap();
                prop_assert_eq!(got, expected);
            }
            None => prop_assert!(fpr_at_tpr(scores, flags, target).is_err()),
        }
    }

    #[test]
    fn selection_mask_reproducible_from_scores(
        confs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
        margin in -0.3f64..0.3,
    ) {
        // Build a two-class prediction whose class-0 confidences are the
        // given pairs; the mask must equal the pointwise criterion.
        let y_tilde = Mat::from_rows(
            &confs.iter().map(|&(t, _)| vec![t, 1.0 - t]).collect::<Vec<_>>()
        );
        let y_hat = Mat::from_rows(
            &confs.iter().map(|&(_, h)| vec![h, 1.0 - h]).collect::<Vec<_>>()
        );
        let pred = PairPrediction {
            logits_tilde: y_tilde.clone(),
            logits_hat: y_hat.clone(),
            y_tilde,
            y_hat,
            c_o: vec![0; confs.len()],
            c_a: vec![0; confs.len()],
        };
        let strategy = SelectionStrategy::ConfidenceDifference {
            margin,
            score_space: tta_core::adapt::ScoreSpace::Softmax,
        };
        let mask = select(&strategy, &pred).unwrap();
        for (i, &(t, h)) in confs.iter().enumerate() {
            prop_assert_eq!(mask[i], h - t >= margin);
        }
    }
}
