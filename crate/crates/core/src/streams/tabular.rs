//! External tabular dataset ingestion.
//!
//! Two on-disk layouts are supported:
//!
//! **CSV** — header row `d0,d1,...,dK,label`, then one sample per line with
//! `K+1` float feature columns and an integer label column. Labels must lie
//! in `[0, C)`, or `[0, C]` when the open-set sentinel is declared.
//!
//! **Flat binary** — all integers/floats little-endian:
//!
//! ```text
//! magic     8 bytes  b"TTAPOOL\0"
//! version   1 byte   POOL_FORMAT_VERSION
//! n         u32      sample count
//! d         u32      feature dimension
//! c         u32      declared class count
//! features  n*d f64  row-major
//! labels    n   i32
//! ```

use crate::linalg::Mat;
use crate::streams::{LabeledPool, StreamError};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const POOL_MAGIC: &[u8; 8] = b"TTAPOOL\0";
pub const POOL_FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TabularKind {
    Csv,
    Binary,
}

/// Declares what a tabular file is expected to contain.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularFormat {
    pub kind: TabularKind,
    /// Number of closed-set classes.
    pub num_classes: usize,
    /// Whether the label `num_classes` is accepted as the open-set sentinel.
    pub allow_open_sentinel: bool,
    /// Expected feature dimension; checked when set.
    pub feature_dim: Option<usize>,
}

fn io_err(e: std::io::Error) -> StreamError {
    StreamError::Io { context: e.to_string() }
}

fn check_label(label: i64, line: usize, fmt: &TabularFormat) -> Result<usize, StreamError> {
    let max = if fmt.allow_open_sentinel { fmt.num_classes as i64 } else { fmt.num_classes as i64 - 1 };
    if label < 0 || label > max {
        return Err(StreamError::Parse {
            line,
            context: format!(
                "label {label} out of range [0, {max}] for {} classes{}",
                fmt.num_classes,
                if fmt.allow_open_sentinel { " with open sentinel" } else { "" }
            ),
        });
    }
    Ok(label as usize)
}

/// Loads a labeled pool from a CSV or flat-binary file per the declared
/// format. Malformed rows and out-of-range labels fail with the offending
/// line number (CSV) or a structural description (binary).
pub fn load_tabular(path: &Path, fmt: &TabularFormat) -> Result<LabeledPool, StreamError> {
    match fmt.kind {
        TabularKind::Csv => load_csv(path, fmt),
        TabularKind::Binary => load_binary(path, fmt),
    }
}

fn load_csv(path: &Path, fmt: &TabularFormat) -> Result<LabeledPool, StreamError> {
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or(StreamError::Parse { line: 1, context: "missing header row".into() })?;
    let header = header.map_err(io_err)?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 2 || cols.last() != Some(&"label") {
        return Err(StreamError::Parse {
            line: 1,
            context: "header must be d0,...,dK,label".into(),
        });
    }
    let d = cols.len() - 1;
    for (k, col) in cols[..d].iter().enumerate() {
        if *col != format!("d{k}") {
            return Err(StreamError::Parse {
                line: 1,
                context: format!("expected column d{k}, found {col:?}"),
            });
        }
    }
    if let Some(expected) = fmt.feature_dim {
        if d != expected {
            return Err(StreamError::Parse {
                line: 1,
                context: format!("feature dimension {d} does not match declared {expected}"),
            });
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1; // 1-based, idx already offset by the header
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != d + 1 {
            return Err(StreamError::Parse {
                line: lineno,
                context: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (k, f) in fields[..d].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| StreamError::Parse {
                line: lineno,
                context: format!("column d{k}: {f:?} is not a float"),
            })?;
            if !v.is_finite() {
                return Err(StreamError::Parse {
                    line: lineno,
                    context: format!("column d{k}: non-finite value"),
                });
            }
            row.push(v);
        }
        let label: i64 = fields[d].trim().parse().map_err(|_| StreamError::Parse {
            line: lineno,
            context: format!("label {:?} is not an integer", fields[d]),
        })?;
        labels.push(check_label(label, lineno, fmt)?);
        rows.push(row);
    }

    let features = if rows.is_empty() { Mat::zeros(0, d) } else { Mat::from_rows(&rows) };
    Ok(LabeledPool { features, labels })
}

fn load_binary(path: &Path, fmt: &TabularFormat) -> Result<LabeledPool, StreamError> {
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != POOL_MAGIC {
        return Err(StreamError::Parse { line: 0, context: "bad pool magic".into() });
    }
    let mut v = [0u8; 1];
    r.read_exact(&mut v).map_err(io_err)?;
    if v[0] != POOL_FORMAT_VERSION {
        return Err(StreamError::Parse {
            line: 0,
            context: format!("unsupported pool version {}, expected {POOL_FORMAT_VERSION}", v[0]),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let c = u32::from_le_bytes(u32buf) as usize;
    if c != fmt.num_classes {
        return Err(StreamError::Parse {
            line: 0,
            context: format!("file declares {c} classes, format expects {}", fmt.num_classes),
        });
    }
    if let Some(expected) = fmt.feature_dim {
        if d != expected {
            return Err(StreamError::Parse {
                line: 0,
                context: format!("feature dimension {d} does not match declared {expected}"),
            });
        }
    }

    let mut data = Vec::with_capacity(n * d);
    let mut f64buf = [0u8; 8];
    for i in 0..n * d {
        r.read_exact(&mut f64buf).map_err(|_| StreamError::Parse {
            line: 0,
            context: format!("truncated feature data at value {i}"),
        })?;
        let v = f64::from_le_bytes(f64buf);
        if !v.is_finite() {
            return Err(StreamError::Parse { line: 0, context: format!("non-finite feature at value {i}") });
        }
        data.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    let mut i32buf = [0u8; 4];
    for i in 0..n {
        r.read_exact(&mut i32buf).map_err(|_| StreamError::Parse {
            line: 0,
            context: format!("truncated labels at sample {i}"),
        })?;
        labels.push(check_label(i32::from_le_bytes(i32buf) as i64, i + 1, fmt)?);
    }

    Ok(LabeledPool { features: Mat::from_flat(n, d, data), labels })
}

/// Writes a pool in the flat binary layout documented above.
pub fn save_pool_binary(pool: &LabeledPool, num_classes: usize, path: &Path) -> Result<(), StreamError> {
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(POOL_MAGIC).map_err(io_err)?;
    w.write_all(&[POOL_FORMAT_VERSION]).map_err(io_err)?;
    w.write_all(&(pool.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(pool.features.cols() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(num_classes as u32).to_le_bytes()).map_err(io_err)?;
    for v in pool.features.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for &l in &pool.labels {
        w.write_all(&(l as i32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_fmt() -> TabularFormat {
        TabularFormat {
            kind: TabularKind::Csv,
            num_classes: 3,
            allow_open_sentinel: false,
            feature_dim: Some(2),
        }
    }

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_with_header_gives_empty_pool() {
        let (_dir, path) = write_tmp("d0,d1,label\n");
        let pool = load_tabular(&path, &csv_fmt()).unwrap();
        assert!(pool.is_empty());
        assert_eq!(pool.features.cols(), 2);
    }

    #[test]
    fn hand_written_rows_parse_exactly() {
        let (_dir, path) = write_tmp("d0,d1,label\n1.5,-2.0,0\n0.25,3.5,2\n-1.0,0.0,1\n");
        let pool = load_tabular(&path, &csv_fmt()).unwrap();
        assert_eq!(pool.labels, vec![0, 2, 1]);
        assert_eq!(pool.features.row(0), &[1.5, -2.0]);
        assert_eq!(pool.features.row(1), &[0.25, 3.5]);
        assert_eq!(pool.features.row(2), &[-1.0, 0.0]);
    }

    #[test]
    fn sentinel_label_rejected_without_declaration() {
        let (_dir, path) = write_tmp("d0,d1,label\n1.0,2.0,3\n");
        let err = load_tabular(&path, &csv_fmt()).unwrap_err();
        match err {
            StreamError::Parse { line, context } => {
                assert_eq!(line, 2);
                assert!(context.contains("label 3"));
            }
            other => panic!("unexpected error {other}"),
        }
        // Same row is accepted once the sentinel is declared.
        let mut fmt = csv_fmt();
        fmt.allow_open_sentinel = true;
        let pool = load_tabular(&path, &fmt).unwrap();
        assert_eq!(pool.labels, vec![3]);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let (_dir, path) = write_tmp("d0,d1,label\n1.0,2.0,0\nbogus,2.0,1\n");
        match load_tabular(&path, &csv_fmt()).unwrap_err() {
            StreamError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
        let (_dir2, path2) = write_tmp("d0,d1,label\n1.0,0\n");
        match load_tabular(&path2, &csv_fmt()).unwrap_err() {
            StreamError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let pool = LabeledPool {
            features: Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.5, 0.125]]),
            labels: vec![0, 2],
        };
        save_pool_binary(&pool, 3, &path).unwrap();
        let fmt = TabularFormat {
            kind: TabularKind::Binary,
            num_classes: 3,
            allow_open_sentinel: false,
            feature_dim: Some(3),
        };
        let loaded = load_tabular(&path, &fmt).unwrap();
        assert_eq!(loaded, pool);
    }

    #[test]
    fn binary_rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let pool = LabeledPool { features: Mat::from_rows(&[vec![1.0]]), labels: vec![0] };
        save_pool_binary(&pool, 2, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = POOL_FORMAT_VERSION + 1;
        std::fs::write(&path, &bytes).unwrap();
        let fmt = TabularFormat {
            kind: TabularKind::Binary,
            num_classes: 2,
            allow_open_sentinel: false,
            feature_dim: None,
        };
        assert!(load_tabular(&path, &fmt).is_err());
    }
}
