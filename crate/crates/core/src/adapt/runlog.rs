//! Per-step run records and their on-disk formats.
//!
//! A run serializes to two files:
//!
//! **JSONL** — line 1 is a header object `{"schema":"runlog","version":1}`,
//! followed by one JSON object per adapted batch, and a final footer object
//! `{"skipped_batches":[...],"aborted":...}`.
//!
//! **Per-sample CSV** — line 1 is the version header
//! `# runlog-samples v1`, line 2 the column header, then one row per sample
//! of every batch.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const RUNLOG_VERSION: u32 = 1;

/// Everything recorded about one sample at one step. Predictions and
/// confidences are captured before the step's parameter update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Ground-truth class, or the open-set sentinel `C`.
    pub label: usize,
    pub open: bool,
    /// Original model's predicted class.
    pub c_o: usize,
    /// Adapted model's predicted class.
    pub c_a: usize,
    /// Original model's confidence on `c_o`.
    pub conf_tilde: f64,
    /// Adapted model's confidence on `c_o`.
    pub conf_hat: f64,
    /// Adapted model's maximum softmax probability.
    pub msp: f64,
    /// Adapted model's maximum logit.
    pub max_logit: f64,
    /// Adapted model's log-sum-exp of logits (higher = more in-distribution).
    pub energy: f64,
    pub selected: bool,
}

impl SampleRecord {
    /// Confidence difference on the originally predicted class.
    pub fn conf_diff(&self) -> f64 {
        self.conf_hat - self.conf_tilde
    }

    /// Whether the adapted model's online prediction was correct. Open-set
    /// samples are never correct.
    pub fn correct(&self) -> bool {
        !self.open && self.c_a == self.label
    }
}

/// One adapted batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub round_id: usize,
    pub domain_id: usize,
    pub loss: f64,
    pub num_selected: usize,
    /// L2 norm of the applied parameter delta (0 when the step was skipped).
    pub update_norm: f64,
    pub samples: Vec<SampleRecord>,
}

/// A batch the loop refused to adapt on (fewer than 2 samples).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedBatch {
    pub round_id: usize,
    pub domain_id: usize,
    pub size: usize,
}

/// Complete log of a scenario run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub skipped_batches: Vec<SkippedBatch>,
    /// Set when a failing step ended the run early.
    pub aborted: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    skipped_batches: Vec<SkippedBatch>,
    aborted: Option<String>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }

    /// Iterates over every sample record in stream order.
    pub fn samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().flat_map(|r| r.samples.iter())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header { schema: "runlog".into(), version: RUNLOG_VERSION };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for record in &self.records {
            writeln!(w, "{}", serde_json::to_string(record)?)?;
        }
        let footer = Footer { skipped_batches: self.skipped_batches.clone(), aborted: self.aborted.clone() };
        writeln!(w, "{}", serde_json::to_string(&footer)?)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<RunLog> {
        let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| bad("empty runlog file".into()))??;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| bad(format!("bad runlog header: {e}")))?;
        if header.schema != "runlog" || header.version != RUNLOG_VERSION {
            return Err(bad(format!(
                "unsupported runlog schema {}/{} (expected runlog/{RUNLOG_VERSION})",
                header.schema, header.version
            )));
        }
        let mut records = Vec::new();
        let mut footer: Option<Footer> = None;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if footer.is_some() {
                return Err(bad("content after runlog footer".into()));
            }
            match serde_json::from_str::<StepRecord>(&line) {
                Ok(rec) => records.push(rec),
                Err(_) => {
                    let f: Footer =
                        serde_json::from_str(&line).map_err(|e| bad(format!("bad runlog line: {e}")))?;
                    footer = Some(f);
                }
            }
        }
        let footer = footer.ok_or_else(|| bad("missing runlog footer".into()))?;
        Ok(RunLog { records, skipped_batches: footer.skipped_batches, aborted: footer.aborted })
    }

    /// Compact per-sample CSV with a version header line.
    pub fn write_samples_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# runlog-samples v{RUNLOG_VERSION}")?;
        writeln!(
            w,
            "step,round,domain,sample,label,open,c_o,c_a,conf_tilde,conf_hat,msp,max_logit,energy,selected"
        )?;
        for record in &self.records {
            for (i, s) in record.samples.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    record.step,
                    record.round_id,
                    record.domain_id,
                    i,
                    s.label,
                    s.open as u8,
                    s.c_o,
                    s.c_a,
                    s.conf_tilde,
                    s.conf_hat,
                    s.msp,
                    s.max_logit,
                    s.energy,
                    s.selected as u8,
                )?;
            }
        }
        Ok(())
    }
}
