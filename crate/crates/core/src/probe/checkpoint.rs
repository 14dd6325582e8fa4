// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe checkpoint file.
//!
//! `ICRP` magic, `u32` LE version (= 1), `u64` LE header length, JSON header
//! (config, layer shapes, seed), zero padding to 64 bytes, then every stored
//! value as `f32` LE in this order: for each linear layer its weight
//! (row-major, `(out, in)`) and bias; then for each batchnorm layer its
//! scale, shift, running mean and running variance.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Linear, ProbeConfig, ProbeModel};
use crate::error::{IcrError, Result};

pub const MAGIC: [u8; 4] = *b"ICRP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ProbeConfig,
    /// `(out, in)` per linear layer.
    linear_shapes: Vec<[usize; 2]>,
    norm_widths: Vec<usize>,
    seed: u64,
    value_count: usize,
}

fn padded(n: usize) -> usize {
    n.div_ceil(64) * 64
}

pub fn encode_checkpoint(model: &ProbeModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        linear_shapes: model.linears.iter().map(|l| [l.weight.nrows(), l.weight.ncols()]).collect(),
        norm_widths: model.norms.iter().map(|n| n.gamma.len()).collect(),
        seed: model.config.seed,
        value_count: values(model).count(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| IcrError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(padded(out.len()), 0);
    for v in values(model) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn values(model: &ProbeModel) -> impl Iterator<Item = f64> + '_ {
    let lin = model.linears.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied());
    let bn = model.norms.iter().flat_map(|n| {
        n.gamma.iter().chain(n.beta.iter()).chain(n.running_mean.iter()).chain(n.running_var.iter()).copied()
    });
    lin.chain(bn)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProbeModel> {
    let err = |m: String| IcrError::Checkpoint(m);
    if bytes.len() < 16 {
        return Err(err("file shorter than preamble".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + hlen > bytes.len() {
        return Err(err("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| err(e.to_string()))?;
    let start = padded(16 + hlen);
    let needed = header.value_count * 4;
    if bytes.len() < start + needed {
        return Err(err("truncated parameter payload".into()));
    }
    let mut vals =
        bytes[start..start + needed].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = vals.by_ref().take(n).collect();
        if v.len() != n {
            return Err(IcrError::Checkpoint("parameter count mismatch".into()));
        }
        Ok(v)
    };

    let mut linears = Vec::new();
    for &[o, i] in &header.linear_shapes {
        let weight = Array2::from_shape_vec((o, i), take(o * i)?).expect("sized");
        let bias = Array1::from(take(o)?);
        linears.push(Linear { weight, bias });
    }
    let mut norms = Vec::new();
    for &w in &header.norm_widths {
        norms.push(BatchNorm {
            gamma: Array1::from(take(w)?),
            beta: Array1::from(take(w)?),
            running_mean: Array1::from(take(w)?),
            running_var: Array1::from(take(w)?),
        });
    }
    Ok(ProbeModel { config: header.config, linears, norms, training: false })
}

pub fn save_checkpoint(model: &ProbeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| IcrError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProbeModel> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| IcrError::io(path, e))?)
}
