//! Metrics export: a JSON document keyed by metric name, plus CSV for
//! series.
//!
//! The JSON document is `{"schema":"metrics","version":1,"metrics":{...}}`
//! with each entry a scalar, a `(round, value)` series, or a matrix with
//! `null` marking undefined cells. Keys are sorted, so serialization is
//! byte-deterministic for a given set of values.

use crate::metrics::GradSimMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

pub const METRICS_VERSION: u32 = 1;

/// One exported metric payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Series(Vec<(usize, f64)>),
    Matrix {
        rows: usize,
        cols: usize,
        cells: Vec<Vec<Option<f64>>>,
        pair_counts: Vec<Vec<u64>>,
        zero_norm_excluded: usize,
    },
}

impl From<&GradSimMatrix> for MetricValue {
    fn from(m: &GradSimMatrix) -> Self {
        let c = m.num_classes();
        MetricValue::Matrix {
            rows: c,
            cols: c,
            cells: m.rows(),
            pair_counts: (0..c).map(|j| (0..c).map(|i| m.pair_count(j, i)).collect()).collect(),
            zero_norm_excluded: m.zero_norm_excluded,
        }
    }
}

/// The exported document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema: String,
    pub version: u32,
    pub metrics: BTreeMap<String, MetricValue>,
}

impl MetricsDoc {
    pub fn new() -> Self {
        MetricsDoc { schema: "metrics".into(), version: METRICS_VERSION, metrics: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: MetricValue) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match self.metrics.get(name) {
            Some(MetricValue::Scalar(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn series(&self, name: &str) -> Option<&[(usize, f64)]> {
        match self.metrics.get(name) {
            Some(MetricValue::Series(s)) => Some(s),
            _ => None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics doc serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: MetricsDoc = serde_json::from_str(text).map_err(|e| format!("bad metrics JSON: {e}"))?;
        if doc.schema != "metrics" || doc.version != METRICS_VERSION {
            return Err(format!(
                "unsupported metrics schema {}/{} (expected metrics/{METRICS_VERSION})",
                doc.schema, doc.version
            ));
        }
        Ok(doc)
    }
}

impl Default for MetricsDoc {
    fn default() -> Self {
        Self::new()
    }
}

/// Writes a `(round, value)` series as a two-column CSV.
pub fn write_series_csv<W: Write>(mut w: W, series: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(w, "round,value")?;
    for (round, value) in series {
        writeln!(w, "{round},{value}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::grad_cos_sim;

    #[test]
    fn json_roundtrip_and_determinism() {
        let mut doc = MetricsDoc::new();
        doc.insert("final_error", MetricValue::Scalar(0.25));
        doc.insert("error_per_round", MetricValue::Series(vec![(1, 0.2), (2, 0.3)]));
        let m = grad_cos_sim(&[vec![1.0, 0.0], vec![1.0, 1.0]], &[1, 0], &[0, 0], 2).unwrap();
        doc.insert("grad_sim", (&m).into());

        let a = doc.to_json_pretty();
        let b = doc.to_json_pretty();
        assert_eq!(a, b);
        let parsed = MetricsDoc::from_json(&a).unwrap();
        assert_eq!(parsed, doc);
        assert_eq!(parsed.scalar("final_error"), Some(0.25));
        assert_eq!(parsed.series("error_per_round").unwrap().len(), 2);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut doc = MetricsDoc::new();
        doc.insert("x", MetricValue::Scalar(1.0));
        let text = doc.to_json_pretty().replace("\"version\": 1", "\"version\": 9");
        assert!(MetricsDoc::from_json(&text).is_err());
    }

    #[test]
    fn series_csv_layout() {
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &[(1, 0.5), (2, 0.25)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "round,value\n1,0.5\n2,0.25\n");
    }
}
