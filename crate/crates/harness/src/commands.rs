//! The four harness commands: pretrain, adapt, sweep, report.

use crate::config::{ExperimentConfig, OodRounds};
use crate::report::print_report;
use crate::{io_runtime, HarnessError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tta_core::adapt::{run_scenario, ModelPair, RunLog, StepRecord};
use tta_core::metrics::{
    confidence_drop_stats, error_rate, error_rate_by_round, grad_cos_sim, ood_eval,
    selection_stats, spearman, write_series_csv, MetricValue, MetricsDoc, NegativesMode,
    OodScoreKind,
};
use tta_core::nn::{self, load_checkpoint, save_checkpoint, SmallClassifier};
use tta_core::streams::{domain_closed_pool, generate_source, make_stream, pool_accuracy, pretrain_source};
use tta_core::Mat;

pub const BUNDLE_VERSION: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest of one adaptation run's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultBundle {
    pub schema_version: u32,
    pub engine_version: String,
    /// SHA-256 of the effective config TOML.
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub duration_seconds: f64,
    pub aborted: Option<String>,
    /// File names inside the bundle directory.
    pub runlog: String,
    pub samples_csv: String,
    pub metrics: String,
    pub config_input: String,
    pub config_effective: String,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl ResultBundle {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }

    pub fn load(dir: &Path) -> Result<ResultBundle> {
        let manifest_path = dir.join("bundle.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| HarnessError::Runtime(format!("cannot read {}: {e}", manifest_path.display())))?;
        let mut bundle: ResultBundle = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Runtime(format!("corrupt bundle manifest {}: {e}", manifest_path.display())))?;
        if bundle.schema_version != BUNDLE_VERSION {
            return Err(HarnessError::Runtime(format!(
                "bundle {} has schema version {}, expected {BUNDLE_VERSION}",
                manifest_path.display(),
                bundle.schema_version
            )));
        }
        bundle.dir = dir.to_path_buf();
        Ok(bundle)
    }
}

/// Pretrains the source model and writes the checkpoint.
///
/// Returns the checkpoint path and the clean held-out accuracy.
pub fn cmd_pretrain(config: &ExperimentConfig) -> Result<(PathBuf, f64)> {
    config.validate()?;
    let source = config.build_source()?;
    let (train, test) = generate_source(&source).map_err(|e| HarnessError::Validation(e.to_string()))?;
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Validation("source spec generates an empty train or test set".into()));
    }
    let init = SmallClassifier::mlp(
        config.source.feature_dim,
        &config.model.hidden,
        config.source.classes,
        config.model.seed,
    )
    .map_err(|e| HarnessError::Validation(e.to_string()))?;
    let model = pretrain_source(init, &train, &config.build_pretrain())
        .map_err(|e| HarnessError::Runtime(format!("pretraining failed: {e}")))?;
    let accuracy = pool_accuracy(&model, &test).map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let path = PathBuf::from(&config.output.checkpoint);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_runtime("creating checkpoint directory", e))?;
        }
    }
    save_checkpoint(&model, &path).map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let summary = serde_json::json!({
        "checkpoint": config.output.checkpoint,
        "clean_holdout_accuracy": accuracy,
        "engine_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(config.to_toml().as_bytes()),
    });
    let summary_path = path.with_extension("pretrain.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("json"))
        .map_err(|e| io_runtime("writing pretrain summary", e))?;

    println!("pretrain: checkpoint {} holdout accuracy {accuracy:.4}", path.display());
    Ok((path, accuracy))
}

fn final_round_records(records: &[StepRecord]) -> Vec<StepRecord> {
    let last = records.iter().map(|r| r.round_id).max();
    match last {
        Some(round) => records.iter().filter(|r| r.round_id == round).cloned().collect(),
        None => Vec::new(),
    }
}

fn assemble_metrics(
    config: &ExperimentConfig,
    log: &RunLog,
    final_model: &SmallClassifier,
) -> Result<MetricsDoc> {
    let mut doc = MetricsDoc::new();
    let records = &log.records;
    let sections = &config.metrics;

    if sections.error {
        if let Ok(rate) = error_rate(records, true) {
            doc.insert("error_rate_online", MetricValue::Scalar(rate));
        }
        let per_round: Vec<(usize, f64)> = error_rate_by_round(records).into_iter().collect();
        if let Some(&(_, first)) = per_round.first() {
            doc.insert("round1_error", MetricValue::Scalar(first));
        }
        if let Some(&(_, last)) = per_round.last() {
            doc.insert("final_round_error", MetricValue::Scalar(last));
        }
        doc.insert("error_rate_per_round", MetricValue::Series(per_round));
    }

    if sections.selection {
        let stats = selection_stats(records);
        if let Some(p) = stats.precision {
            doc.insert("selection_precision", MetricValue::Scalar(p));
        }
        if let Some(r) = stats.recall {
            doc.insert("selection_recall", MetricValue::Scalar(r));
        }
        doc.insert("selection_tp", MetricValue::Scalar(stats.tp as f64));
        doc.insert("selection_fp", MetricValue::Scalar(stats.fp as f64));
        doc.insert("selection_fn", MetricValue::Scalar(stats.fn_ as f64));
        doc.insert("selection_tn", MetricValue::Scalar(stats.tn as f64));
    }

    if sections.confidence_drop {
        let drops = confidence_drop_stats(records);
        let counts: Vec<(usize, f64)> =
            drops.per_round.iter().map(|r| (r.round_id, r.count as f64)).collect();
        let fractions: Vec<(usize, f64)> = drops
            .per_round
            .iter()
            .filter_map(|r| r.wrong_fraction.map(|f| (r.round_id, f)))
            .collect();
        if counts.len() >= 2 {
            let xs: Vec<f64> = counts.iter().map(|&(r, _)| r as f64).collect();
            let ys: Vec<f64> = counts.iter().map(|&(_, c)| c).collect();
            if let Ok(rho) = spearman(&xs, &ys) {
                doc.insert("confidence_drop_spearman", MetricValue::Scalar(rho));
            }
        }
        doc.insert("confidence_drop_count", MetricValue::Series(counts));
        doc.insert("confidence_drop_wrong_fraction", MetricValue::Series(fractions));
    }

    if sections.ood {
        let final_slice = final_round_records(records);
        for kind in OodScoreKind::ALL {
            for (mode, mode_name) in [
                (NegativesMode::IncludeClosedWrong, "include"),
                (NegativesMode::ExcludeClosedWrong, "exclude"),
            ] {
                for (slice, slice_name) in [(&final_slice, "final"), (records, "pooled")] {
                    if let Ok((auroc, fpr)) = ood_eval(slice, kind, mode) {
                        doc.insert(
                            &format!("ood_auroc_{}_{mode_name}_{slice_name}", kind.name()),
                            MetricValue::Scalar(auroc),
                        );
                        doc.insert(
                            &format!("ood_fpr95_{}_{mode_name}_{slice_name}", kind.name()),
                            MetricValue::Scalar(fpr),
                        );
                    }
                }
            }
        }
        let slice_name = match sections.ood_rounds {
            OodRounds::Final => "final",
            OodRounds::Pooled => "pooled",
        };
        doc.insert("ood_headline_slice", MetricValue::Scalar(0.0));
        if let Some(v) = doc.scalar(&format!("ood_auroc_conf_diff_include_{slice_name}")) {
            doc.insert("ood_headline_auroc_conf_diff", MetricValue::Scalar(v));
        }
        if let Some(v) = doc.scalar(&format!("ood_auroc_msp_include_{slice_name}")) {
            doc.insert("ood_headline_auroc_msp", MetricValue::Scalar(v));
        }
    }

    if sections.grad_sim && !records.is_empty() {
        let scenario = config.build_scenario()?;
        let adaptation = config.build_adaptation()?;
        let last_domain = scenario.corruption_sequence.len() - 1;
        let pool = domain_closed_pool(&scenario, last_domain)
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        let cap = sections.grad_sim_max_samples.min(pool.len());
        let mut grads = Vec::new();
        let mut truths = Vec::new();
        let mut preds = Vec::new();
        let batch = config.scenario.batch_size;
        let mut start = 0usize;
        while start < cap {
            let end = (start + batch).min(cap);
            if end - start < 2 {
                break;
            }
            let rows: Vec<Vec<f64>> = (start..end).map(|i| pool.features.row(i).to_vec()).collect();
            let features = Mat::from_rows(&rows);
            let (logits, _) =
                nn::forward(final_model, &features).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            for (bi, i) in (start..end).enumerate() {
                truths.push(pool.labels[i]);
                preds.push(logits.argmax_row(bi));
            }
            grads.extend(
                nn::per_sample_gradients(final_model, &features, adaptation.scope)
                    .map_err(|e| HarnessError::Runtime(e.to_string()))?,
            );
            start = end;
        }
        if !grads.is_empty() {
            let matrix = grad_cos_sim(&grads, &truths, &preds, config.source.classes)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            if let Some(v) = matrix.diag_mean() {
                doc.insert("grad_sim_diag_mean", MetricValue::Scalar(v));
            }
            if let Some(v) = matrix.offdiag_mean() {
                doc.insert("grad_sim_offdiag_mean", MetricValue::Scalar(v));
            }
            doc.insert("grad_sim_matrix", (&matrix).into());
        }
    }

    Ok(doc)
}

/// Runs the adaptation scenario end to end and persists the result bundle.
///
/// `input_text` is the raw config file content (empty when none was given);
/// it is stored byte-identically for auditability. A failing step persists
/// the partial log and reports a runtime error.
pub fn cmd_adapt(
    config: &ExperimentConfig,
    input_text: &str,
    overrides: &[String],
) -> Result<ResultBundle> {
    config.validate()?;
    let started = Instant::now();

    let checkpoint_path = Path::new(&config.output.checkpoint);
    if !checkpoint_path.exists() {
        return Err(HarnessError::Validation(format!(
            "checkpoint {} does not exist; run `tta pretrain` first",
            checkpoint_path.display()
        )));
    }
    let pretrained = load_checkpoint(checkpoint_path).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    if pretrained.input_dim() != config.source.feature_dim
        || pretrained.num_classes() != config.source.classes
    {
        return Err(HarnessError::Validation(format!(
            "checkpoint shape ({} -> {}) does not match source spec ({} -> {})",
            pretrained.input_dim(),
            pretrained.num_classes(),
            config.source.feature_dim,
            config.source.classes
        )));
    }

    let scenario = config.build_scenario()?;
    let adaptation = config.build_adaptation()?;
    let stream = make_stream(&scenario).map_err(|e| HarnessError::Validation(e.to_string()))?;
    let mut pair = ModelPair::new(pretrained);
    let log = run_scenario(&mut pair, &adaptation, stream);

    let dir = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&dir).map_err(|e| io_runtime("creating output directory", e))?;

    let runlog_file = fs::File::create(dir.join("runlog.jsonl"))
        .map_err(|e| io_runtime("creating runlog.jsonl", e))?;
    log.write_jsonl(std::io::BufWriter::new(runlog_file))
        .map_err(|e| io_runtime("writing runlog.jsonl", e))?;
    let csv_file = fs::File::create(dir.join("samples.csv"))
        .map_err(|e| io_runtime("creating samples.csv", e))?;
    log.write_samples_csv(std::io::BufWriter::new(csv_file))
        .map_err(|e| io_runtime("writing samples.csv", e))?;

    let effective = config.to_toml();
    fs::write(dir.join("config_input.toml"), input_text)
        .map_err(|e| io_runtime("writing config_input.toml", e))?;
    fs::write(dir.join("config_effective.toml"), &effective)
        .map_err(|e| io_runtime("writing config_effective.toml", e))?;

    let metrics = if log.is_aborted() {
        MetricsDoc::new()
    } else {
        assemble_metrics(config, &log, pair.theta_a())?
    };
    fs::write(dir.join("metrics.json"), metrics.to_json_pretty())
        .map_err(|e| io_runtime("writing metrics.json", e))?;

    if let Some(series) = metrics.series("error_rate_per_round") {
        let f = fs::File::create(dir.join("error_per_round.csv"))
            .map_err(|e| io_runtime("creating error_per_round.csv", e))?;
        write_series_csv(std::io::BufWriter::new(f), series)
            .map_err(|e| io_runtime("writing error_per_round.csv", e))?;
    }
    if let Some(series) = metrics.series("confidence_drop_count") {
        let f = fs::File::create(dir.join("confidence_drop.csv"))
            .map_err(|e| io_runtime("creating confidence_drop.csv", e))?;
        write_series_csv(std::io::BufWriter::new(f), series)
            .map_err(|e| io_runtime("writing confidence_drop.csv", e))?;
    }

    let bundle = ResultBundle {
        schema_version: BUNDLE_VERSION,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(effective.as_bytes()),
        overrides: overrides.to_vec(),
        duration_seconds: started.elapsed().as_secs_f64(),
        aborted: log.aborted.clone(),
        runlog: "runlog.jsonl".into(),
        samples_csv: "samples.csv".into(),
        metrics: "metrics.json".into(),
        config_input: "config_input.toml".into(),
        config_effective: "config_effective.toml".into(),
        dir: dir.clone(),
    };
    fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&bundle).expect("json"))
        .map_err(|e| io_runtime("writing bundle.json", e))?;

    if let Some(reason) = &log.aborted {
        return Err(HarnessError::Runtime(format!(
            "run aborted ({reason}); partial log persisted in {}",
            dir.display()
        )));
    }

    println!(
        "adapt: {} steps, final-round error {}, bundle {}",
        log.records.len(),
        metrics
            .scalar("final_round_error")
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(bundle)
}

/// One axis of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Strategy(Vec<String>),
    LearningRate(Vec<f64>),
    BatchSize(Vec<usize>),
}

impl SweepAxis {
    /// Parses `strategy=a,b,...` / `lr=...` / `batch=...`.
    pub fn parse(text: &str) -> Result<SweepAxis> {
        let (name, rest) = text
            .split_once('=')
            .ok_or_else(|| HarnessError::Validation(format!("axis {text:?} is not name=v1,v2,...")))?;
        let values: Vec<&str> = rest.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(HarnessError::Validation(format!("axis {text:?} has no values")));
        }
        match name.trim() {
            "strategy" => Ok(SweepAxis::Strategy(values.iter().map(|s| s.to_string()).collect())),
            "lr" => {
                let parsed: std::result::Result<Vec<f64>, _> = values.iter().map(|v| v.parse()).collect();
                Ok(SweepAxis::LearningRate(parsed.map_err(|_| {
                    HarnessError::Validation(format!("axis {text:?} has a non-numeric learning rate"))
                })?))
            }
            "batch" => {
                let parsed: std::result::Result<Vec<usize>, _> = values.iter().map(|v| v.parse()).collect();
                Ok(SweepAxis::BatchSize(parsed.map_err(|_| {
                    HarnessError::Validation(format!("axis {text:?} has a non-integer batch size"))
                })?))
            }
            other => Err(HarnessError::Validation(format!(
                "unknown sweep axis {other:?} (expected strategy, lr, or batch)"
            ))),
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::Strategy(vs) => vs.clone(),
            SweepAxis::LearningRate(vs) => vs.iter().map(|v| format!("{v}")).collect(),
            SweepAxis::BatchSize(vs) => vs.iter().map(|v| format!("{v}")).collect(),
        }
    }

    fn overrides_for(&self, index: usize) -> Vec<String> {
        match self {
            SweepAxis::Strategy(vs) => vec![format!("adapt.strategy={:?}", vs[index])],
            SweepAxis::LearningRate(vs) => vec![format!("adapt.learning_rate={}", vs[index])],
            SweepAxis::BatchSize(vs) => vec![
                format!("adapt.batch_size={}", vs[index]),
                format!("scenario.batch_size={}", vs[index]),
            ],
        }
    }
}

/// Per-cell sweep outcome.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub label: String,
    pub dir: String,
    pub status: String,
    pub round1_error: Option<f64>,
    pub final_round_error: Option<f64>,
}

/// Runs one adaptation per axis value, continuing past per-cell failures,
/// and writes an aggregate CSV with mean and standard deviation of the
/// final-round error.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    base_input: &str,
    base_overrides: &[String],
    axis: &SweepAxis,
) -> Result<(Vec<SweepCell>, PathBuf)> {
    base.validate()?;
    let out_root = PathBuf::from(&base.output.dir);
    fs::create_dir_all(&out_root).map_err(|e| io_runtime("creating sweep directory", e))?;

    let labels = axis.labels();
    let mut cells = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let cell_dir = out_root.join(format!("cell_{i}_{}", sanitize(label)));
        let mut overrides: Vec<String> = base_overrides.to_vec();
        overrides.extend(axis.overrides_for(i));
        overrides.push(format!("output.dir={:?}", cell_dir.display().to_string()));

        let outcome = ExperimentConfig::from_toml(base_input, &overrides)
            .and_then(|config| cmd_adapt(&config, base_input, &overrides));
        match outcome {
            Ok(bundle) => {
                let metrics_text = fs::read_to_string(bundle.metrics_path())
                    .map_err(|e| io_runtime("reading cell metrics", e))?;
                let metrics = MetricsDoc::from_json(&metrics_text).map_err(HarnessError::Runtime)?;
                cells.push(SweepCell {
                    label: label.clone(),
                    dir: cell_dir.display().to_string(),
                    status: "ok".into(),
                    round1_error: metrics.scalar("round1_error"),
                    final_round_error: metrics.scalar("final_round_error"),
                });
            }
            Err(e) => {
                eprintln!("sweep cell {label}: {e}");
                cells.push(SweepCell {
                    label: label.clone(),
                    dir: cell_dir.display().to_string(),
                    status: format!("failed: {e}"),
                    round1_error: None,
                    final_round_error: None,
                });
            }
        }
    }

    let finals: Vec<f64> = cells.iter().filter_map(|c| c.final_round_error).collect();
    let (mean, std) = mean_std(&finals);

    let csv_path = out_root.join("sweep_summary.csv");
    let mut csv = String::from("cell,label,status,round1_error,final_round_error\n");
    for (i, c) in cells.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            c.label,
            c.status.replace(',', ";"),
            c.round1_error.map(|v| v.to_string()).unwrap_or_default(),
            c.final_round_error.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    csv.push_str(&format!(
        "aggregate,,{} cells ok,mean={},std={}\n",
        finals.len(),
        mean.map(|v| v.to_string()).unwrap_or_default(),
        std.map(|v| v.to_string()).unwrap_or_default(),
    ));
    fs::write(&csv_path, &csv).map_err(|e| io_runtime("writing sweep_summary.csv", e))?;

    println!("sweep: {} cells, summary {}", cells.len(), csv_path.display());
    for (i, c) in cells.iter().enumerate() {
        println!(
            "  cell {i} {:<14} {:<8} final err {}",
            c.label,
            c.status.split(':').next().unwrap_or(""),
            c.final_round_error.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    if let (Some(m), Some(s)) = (mean, std) {
        println!("  final-round error mean {m:.4} std {s:.4}");
    }
    Ok((cells, csv_path))
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Loads bundles, prints the comparison summary, and writes plot-ready CSVs
/// next to it.
pub fn cmd_report(bundle_dirs: &[PathBuf], out_dir: Option<&Path>) -> Result<()> {
    if bundle_dirs.is_empty() {
        return Err(HarnessError::Validation("report needs at least one bundle directory".into()));
    }
    let mut loaded = Vec::new();
    for dir in bundle_dirs {
        let bundle = ResultBundle::load(dir)?;
        let metrics_text = fs::read_to_string(bundle.metrics_path()).map_err(|e| {
            HarnessError::Runtime(format!("cannot read {}: {e}", bundle.metrics_path().display()))
        })?;
        let metrics = MetricsDoc::from_json(&metrics_text).map_err(|e| {
            HarnessError::Runtime(format!("{}: {e}", bundle.metrics_path().display()))
        })?;
        loaded.push((bundle, metrics));
    }

    print_report(&loaded);

    if let Some(out) = out_dir {
        fs::create_dir_all(out).map_err(|e| io_runtime("creating report directory", e))?;
        for (bundle, metrics) in &loaded {
            let stem = bundle
                .dir
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "bundle".into());
            if let Some(series) = metrics.series("error_rate_per_round") {
                let f = fs::File::create(out.join(format!("{stem}_error_per_round.csv")))
                    .map_err(|e| io_runtime("creating report csv", e))?;
                write_series_csv(std::io::BufWriter::new(f), series)
                    .map_err(|e| io_runtime("writing report csv", e))?;
            }
            if let Some(series) = metrics.series("confidence_drop_count") {
                let f = fs::File::create(out.join(format!("{stem}_confidence_drop.csv")))
                    .map_err(|e| io_runtime("creating report csv", e))?;
                write_series_csv(std::io::BufWriter::new(f), series)
                    .map_err(|e| io_runtime("writing report csv", e))?;
            }
        }
    }
    Ok(())
}

/// Reads a run log back from a bundle directory.
pub fn load_runlog(bundle: &ResultBundle) -> Result<RunLog> {
    let path = bundle.dir.join(&bundle.runlog);
    let file = fs::File::open(&path)
        .map_err(|e| HarnessError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    RunLog::read_jsonl(BufReader::new(file))
        .map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}
