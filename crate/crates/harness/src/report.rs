//! Human-readable comparison tables for result bundles.

use crate::commands::ResultBundle;
use tta_core::metrics::MetricsDoc;

const HEADLINE_ROWS: &[(&str, &str)] = &[
    ("round1_error", "round-1 error"),
    ("final_round_error", "final-round error"),
    ("error_rate_online", "online error (all rounds)"),
    ("selection_precision", "selection precision"),
    ("selection_recall", "selection recall"),
    ("ood_headline_auroc_conf_diff", "AUROC conf-diff"),
    ("ood_headline_auroc_msp", "AUROC msp"),
    ("confidence_drop_spearman", "drop-count trend (rho)"),
    ("grad_sim_diag_mean", "grad-sim diag mean"),
    ("grad_sim_offdiag_mean", "grad-sim offdiag mean"),
];

pub fn print_report(bundles: &[(ResultBundle, MetricsDoc)]) {
    println!("report: {} bundle(s)", bundles.len());
    for (bundle, _) in bundles {
        println!(
            "  {}  config {}  engine {}{}",
            bundle.dir.display(),
            &bundle.config_sha256[..12.min(bundle.config_sha256.len())],
            bundle.engine_version,
            bundle
                .aborted
                .as_deref()
                .map(|r| format!("  ABORTED: {r}"))
                .unwrap_or_default()
        );
    }

    let names: Vec<String> = bundles
        .iter()
        .map(|(b, _)| {
            b.dir
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "bundle".into())
        })
        .collect();

    print!("{:<28}", "metric");
    for name in &names {
        print!(" {:>16.16}", name);
    }
    if bundles.len() == 2 {
        print!(" {:>12}", "delta");
    }
    println!();

    for (key, label) in HEADLINE_ROWS {
        let values: Vec<Option<f64>> = bundles.iter().map(|(_, m)| m.scalar(key)).collect();
        if values.iter().all(|v| v.is_none()) {
            continue;
        }
        print!("{label:<28}");
        for v in &values {
            match v {
                Some(x) => print!(" {x:>16.4}"),
                None => print!(" {:>16}", "-"),
            }
        }
        if bundles.len() == 2 {
            if let (Some(a), Some(b)) = (values[0], values[1]) {
                print!(" {:>+12.4}", b - a);
            } else {
                print!(" {:>12}", "-");
            }
        }
        println!();
    }
}
