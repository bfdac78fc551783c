//! Scratch calibration probe: per-round error of All vs ConfidenceDifference
//! on a candidate default scenario.

use std::time::Instant;
use tta_core::adapt::{run_scenario, AdaptationConfig, ModelPair, SelectionStrategy};
use tta_core::metrics::{
    confidence_drop_stats, error_rate_by_round, grad_cos_sim, ood_eval, selection_stats,
    NegativesMode, OodScoreKind,
};
use tta_core::nn::{self, SmallClassifier};
use tta_core::streams::{
    domain_closed_pool, generate_source, make_stream, pool_accuracy, pretrain_source,
    CorruptionKind, CorruptionOp, OpenSetMode, PretrainConfig, ScenarioSpec, SyntheticSourceSpec,
};
use tta_core::Mat;

fn default_corruptions(feature_dim: usize, gn: f64, fs: f64, rt: f64, ms: f64) -> Vec<CorruptionOp> {
    let severities = [5u8, 4, 3, 2];
    let mut ops = Vec::new();
    'outer: for &s in &severities {
        for kind in [
            CorruptionKind::GaussianNoise { sigma: gn },
            CorruptionKind::FeatureScale { factor: fs },
            CorruptionKind::Rotation2dPairs { angle: rt },
            CorruptionKind::MeanShift { delta: vec![ms; feature_dim] },
        ] {
            ops.push(CorruptionOp { kind, severity: s });
            if ops.len() == 15 {
                break 'outer;
            }
        }
    }
    ops
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let getf = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let rounds: usize = getf(1, 50.0) as usize;
    let seed: u64 = getf(2, 11.0) as u64;
    let lr: f64 = getf(3, 1e-3);
    let radius = getf(4, 3.0);
    let cov = getf(5, 0.6);
    let gn = getf(6, 0.2);
    let rt = getf(7, 0.15);
    let open_scale = getf(8, 2.5);
    let fs = getf(9, 1.15);
    let holdout = getf(11, 50.0) as usize;

    let source = SyntheticSourceSpec::well_separated(8, 16, radius, cov, 400, holdout, 17);
    let (train, test) = generate_source(&source).unwrap();
    let t0 = Instant::now();
    let model = pretrain_source(
        SmallClassifier::mlp(16, &[64, 64], 8, 1).unwrap(),
        &train,
        &PretrainConfig::default(),
    )
    .unwrap();
    let acc = pool_accuracy(&model, &test).unwrap();
    println!("pretrain: clean held-out accuracy {acc:.4} in {:.1?}", t0.elapsed());

    let spec = ScenarioSpec {
        open_set: OpenSetMode::Mixed {
            open_class_means: ScenarioSpec::mirrored_open_means(&source, open_scale),
        },
        corruption_sequence: default_corruptions(16, gn, fs, rt, 0.35),
        source,
        rounds,
        batch_size: 200,
        seed,
    };

    let lambda_all = getf(10, 0.5);
    for (name, strategy, lambda_max) in [
        ("all", SelectionStrategy::All, lambda_all),
        ("confdiff", SelectionStrategy::confidence_difference(), 0.5),
        ("conf0.9", SelectionStrategy::ConfidenceThreshold { p: 0.9 }, lambda_all),
        ("entropy", SelectionStrategy::entropy_threshold_default(8), lambda_all),
    ] {
        let config =
            AdaptationConfig { strategy, learning_rate: lr, lambda_max, ..AdaptationConfig::default() };
        let mut pair = ModelPair::new(model.clone());
        let t = Instant::now();
        let log = run_scenario(&mut pair, &config, make_stream(&spec).unwrap());
        let per_round = error_rate_by_round(&log.records);
        let first = per_round.values().next().copied().unwrap_or(f64::NAN);
        let last = per_round.values().last().copied().unwrap_or(f64::NAN);
        let stats = selection_stats(&log.records);
        let final_round = per_round.keys().last().copied().unwrap_or(0);
        let final_records: Vec<_> =
            log.records.iter().filter(|r| r.round_id == final_round).cloned().collect();
        let auroc_cd = ood_eval(&final_records, OodScoreKind::ConfDiff, NegativesMode::IncludeClosedWrong)
            .map(|(a, _)| a)
            .unwrap_or(f64::NAN);
        let auroc_msp = ood_eval(&final_records, OodScoreKind::Msp, NegativesMode::IncludeClosedWrong)
            .map(|(a, _)| a)
            .unwrap_or(f64::NAN);
        let drops = confidence_drop_stats(&log.records);
        let drop_first = drops.per_round.first().map(|r| r.count).unwrap_or(0);
        let drop_last = drops.per_round.last().map(|r| r.count).unwrap_or(0);
        println!(
            "{name:9} r1 err {first:.4}  final err {last:.4}  prec {:?} rec {:?}  auroc cd/msp {auroc_cd:.3}/{auroc_msp:.3}  drops {drop_first}->{drop_last}  [{:.1?}]",
            stats.precision.map(|v| (v * 1000.0).round() / 1000.0),
            stats.recall.map(|v| (v * 1000.0).round() / 1000.0),
            t.elapsed()
        );
        let mut curve: Vec<(usize, f64)> = per_round.into_iter().collect();
        curve.sort_by_key(|&(r, _)| r);
        let sampled: Vec<String> = curve
            .iter()
            .step_by((rounds / 10).max(1))
            .map(|(r, e)| format!("{r}:{e:.3}"))
            .collect();
        println!("          curve {}", sampled.join(" "));

        if name == "all" {
            // Gradient cosine-similarity structure on the final model over
            // the last domain's closed pool (subsampled to 3 batches).
            let pool = domain_closed_pool(&spec, spec.corruption_sequence.len() - 1).unwrap();
            let scope = config.scope;
            let mut grads = Vec::new();
            let mut truths = Vec::new();
            let mut preds = Vec::new();
            for chunk_start in (0..pool.len().min(600)).step_by(200) {
                let end = (chunk_start + 200).min(pool.len());
                let rows: Vec<Vec<f64>> =
                    (chunk_start..end).map(|i| pool.features.row(i).to_vec()).collect();
                let batch = Mat::from_rows(&rows);
                let (logits, _) = nn::forward(pair.theta_a(), &batch).unwrap();
                for (bi, i) in (chunk_start..end).enumerate() {
                    truths.push(pool.labels[i]);
                    preds.push(logits.argmax_row(bi));
                }
                grads.extend(nn::per_sample_gradients(pair.theta_a(), &batch, scope).unwrap());
            }
            let m = grad_cos_sim(&grads, &truths, &preds, 8).unwrap();
            println!(
                "          gradsim diag {:?} offdiag {:?} zero-norm {}",
                m.diag_mean().map(|v| (v * 1000.0).round() / 1000.0),
                m.offdiag_mean().map(|v| (v * 1000.0).round() / 1000.0),
                m.zero_norm_excluded
            );
        }
    }
}
