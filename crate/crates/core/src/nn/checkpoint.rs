//! Versioned flat binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8  bytes  b"TTACKPT\0"
//! version          1  byte   CHECKPOINT_VERSION
//! input_dim        u32
//! num_classes     u32
//! num_layers       u32
//! per layer:
//!   out_dim        u32
//!   activation     u8   (0 = ReLU, 1 = Identity)
//!   stats_mode     u8   (0 = SourceStats, 1 = TestBatchStats)
//!   eps            f64
//! per layer, in declared order:
//!   weight         out_dim * in_dim  f64 (row-major)
//!   bias           out_dim           f64
//!   gamma          out_dim           f64
//!   beta           out_dim           f64
//!   running_mean   out_dim           f64
//!   running_var    out_dim           f64
//! ```
//!
//! Loading rejects wrong magic, version mismatches, truncated files,
//! non-finite parameters, and non-positive running variances.

use crate::linalg::Mat;
use crate::nn::{Activation, BatchNormState, LayerBlock, NnError, SmallClassifier, StatsMode};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TTACKPT\0";
pub const CHECKPOINT_VERSION: u8 = 1;

fn io_err(e: std::io::Error) -> NnError {
    NnError::Io { context: e.to_string() }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), NnError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> Result<(), NnError> {
    for v in vs {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, NnError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf[0])
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf).map_err(io_err)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &SmallClassifier, path: &Path) -> Result<(), NnError> {
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[CHECKPOINT_VERSION]).map_err(io_err)?;
    write_u32(&mut w, model.input_dim() as u32)?;
    write_u32(&mut w, model.num_classes() as u32)?;
    write_u32(&mut w, model.layers().len() as u32)?;
    for layer in model.layers() {
        write_u32(&mut w, layer.out_dim() as u32)?;
        let act = match layer.activation {
            Activation::Relu => 0u8,
            Activation::Identity => 1u8,
        };
        let mode = match layer.bn.stats_mode {
            StatsMode::SourceStats => 0u8,
            StatsMode::TestBatchStats => 1u8,
        };
        w.write_all(&[act, mode]).map_err(io_err)?;
        w.write_all(&layer.bn.eps.to_le_bytes()).map_err(io_err)?;
    }
    for layer in model.layers() {
        write_f64_slice(&mut w, layer.weight.data())?;
        write_f64_slice(&mut w, &layer.bias)?;
        write_f64_slice(&mut w, &layer.bn.gamma)?;
        write_f64_slice(&mut w, &layer.bn.beta)?;
        write_f64_slice(&mut w, &layer.bn.running_mean)?;
        write_f64_slice(&mut w, &layer.bn.running_var)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<SmallClassifier, NnError> {
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint { context: "bad magic header".into() });
    }
    let version = read_u8(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint {
            context: format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }

    let input_dim = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;
    let num_layers = read_u32(&mut r)? as usize;
    if num_layers == 0 || num_layers > 1024 {
        return Err(NnError::Checkpoint { context: format!("implausible layer count {num_layers}") });
    }

    struct Header {
        out_dim: usize,
        activation: Activation,
        stats_mode: StatsMode,
        eps: f64,
    }
    let mut headers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let out_dim = read_u32(&mut r)? as usize;
        let act = match read_u8(&mut r)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            v => {
                return Err(NnError::Checkpoint { context: format!("unknown activation tag {v}") });
            }
        };
        let mode = match read_u8(&mut r)? {
            0 => StatsMode::SourceStats,
            1 => StatsMode::TestBatchStats,
            v => {
                return Err(NnError::Checkpoint { context: format!("unknown stats mode tag {v}") });
            }
        };
        let eps = {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(io_err)?;
            f64::from_le_bytes(buf)
        };
        headers.push(Header { out_dim, activation: act, stats_mode: mode, eps });
    }

    let mut layers = Vec::with_capacity(num_layers);
    let mut in_dim = input_dim;
    for h in &headers {
        let weight = Mat::from_flat(h.out_dim, in_dim, read_f64_vec(&mut r, h.out_dim * in_dim)?);
        let bias = read_f64_vec(&mut r, h.out_dim)?;
        let gamma = read_f64_vec(&mut r, h.out_dim)?;
        let beta = read_f64_vec(&mut r, h.out_dim)?;
        let running_mean = read_f64_vec(&mut r, h.out_dim)?;
        let running_var = read_f64_vec(&mut r, h.out_dim)?;
        layers.push(LayerBlock {
            weight,
            bias,
            bn: BatchNormState {
                running_mean,
                running_var,
                gamma,
                beta,
                eps: h.eps,
                stats_mode: h.stats_mode,
            },
            activation: h.activation,
        });
        in_dim = h.out_dim;
    }

    // Reject trailing garbage.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(NnError::Checkpoint { context: "trailing bytes after parameters".into() });
        }
        Err(e) => return Err(io_err(e)),
    }

    SmallClassifier::new(layers, input_dim, num_classes)
        .map_err(|e| NnError::Checkpoint { context: format!("invalid model in checkpoint: {e}") })
}
