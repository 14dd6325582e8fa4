// SPDX-License-Identifier: MIT OR Apache-2.0

//! ICRD v1 activation-dump container.
//!
//! Layout, in order:
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 4                | magic `ICRD`                                         |
//! | 4                | version, `u32` little-endian (= 1)                   |
//! | 8                | header length in bytes, `u64` little-endian          |
//! | header length    | UTF-8 JSON header (scalars + tensor directory)       |
//! | 0..63            | zero padding up to the next 64-byte boundary         |
//! | payload length   | raw tensors, `f32` little-endian, each 64-aligned    |
//!
//! Directory offsets are relative to the start of the payload section. Since
//! the payload section itself starts on a 64-byte boundary, every tensor is
//! 64-byte aligned in absolute file terms as well.
//!
//! Attention tensors are causal: entries above the diagonal (`j > i`) carry
//! no meaning. The writer stores them as zero and no reader in this crate
//! ever looks at them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};

pub const MAGIC: [u8; 4] = *b"ICRD";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const DTYPE_F32LE: &str = "f32le";

const PREAMBLE: usize = 16;

/// Half-open interval `[start, end)` of answer-token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
}

impl AnswerSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Whether `attn` holds raw query-key logits or already-normalized weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    #[default]
    PreSoftmax,
    PostSoftmax,
}

/// One teacher-forced forward pass over a (question, answer) pair.
///
/// `hidden` has shape `(L + 1, N, d)` with slice 0 the embedding output;
/// `attn` has shape `(L, N, N)` and holds head-averaged scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub example_id: String,
    pub dataset: String,
    pub hidden: Array3<f32>,
    pub attn: Array3<f32>,
    /// Optional per-head scores, shape `(L, H, N, N)`.
    pub attn_perhead: Option<Array4<f32>>,
    pub attn_kind: AttnKind,
    pub answer_span: AnswerSpan,
    /// 1 = hallucinated, 0 = faithful.
    pub label: u8,
    pub logprob: Option<Vec<f32>>,
    pub tokens: Vec<String>,
    /// Free-form provenance (model id, capture options, soft-capping, ...).
    pub metadata: BTreeMap<String, String>,
}

impl ActivationRecord {
    pub fn n_tokens(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn n_layers(&self) -> usize {
        self.attn.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.shape()[2]
    }

    pub fn is_hallucinated(&self) -> bool {
        self.label == 1
    }

    /// Zeroes every attention entry above the diagonal, in place.
    pub fn zero_upper_triangle(&mut self) {
        zero_upper(&mut self.attn.view_mut().into_dyn());
        if let Some(per_head) = self.attn_perhead.as_mut() {
            zero_upper(&mut per_head.view_mut().into_dyn());
        }
    }
}

fn zero_upper(t: &mut ndarray::ArrayViewMutD<'_, f32>) {
    let nd = t.ndim();
    let n = t.shape()[nd - 1];
    for (flat, v) in t.iter_mut().enumerate() {
        let j = flat % n;
        let i = (flat / n) % n;
        if j > i {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

/// JSON header of an ICRD file. Field order here is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub example_id: String,
    pub dataset: String,
    pub n_tokens: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub answer_span: [usize; 2],
    pub label: u8,
    pub attn_kind: AttnKind,
    pub tokens: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub payload_length: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Field or tensor the violation refers to.
    pub location: String,
    /// Offending index within the tensor, when there is one.
    pub index: Option<Vec<usize>>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: &str, index: Option<Vec<usize>>, message: impl Into<String>) {
        self.violations.push(Violation { location: location.to_string(), index, message: message.into() });
    }

    fn into_result(self) -> Result<()> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => {
                let message = match v.index {
                    Some(idx) => format!("{} at {:?}", v.message, idx),
                    None => v.message,
                };
                Err(IcrError::invariant(v.location, message))
            }
        }
    }
}

/// Checks every record invariant and reports all violations found.
pub fn validate_dump(record: &ActivationRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    let hs = record.hidden.shape();
    let (l1, n, d) = (hs[0], hs[1], hs[2]);
    let a = record.attn.shape();

    if l1 < 2 {
        report.push("hidden", None, "need at least one decoder layer plus the embedding slice");
    }
    if n == 0 {
        report.push("hidden", None, "token count must be positive");
    }
    if d == 0 {
        report.push("hidden", None, "hidden dimension must be positive");
    }
    let layers = l1.saturating_sub(1);
    let attn_shape_ok = a == [layers, n, n];
    if !attn_shape_ok {
        report.push(
            "attn",
            None,
            format!("shape {:?} inconsistent with hidden {:?}; expected [{layers}, {n}, {n}]", a, hs),
        );
    }

    let span = record.answer_span;
    if span.is_empty() {
        report.push("answer_span", None, "empty answer span");
    }
    if span.end > n {
        report.push("answer_span", None, "span exceeds token count");
    }
    if record.label > 1 {
        report.push("label", None, format!("label must be 0 or 1, got {}", record.label));
    }
    if record.tokens.len() != n {
        report.push("tokens", None, format!("expected {n} token strings, got {}", record.tokens.len()));
    }

    if let Some((idx, _)) = record.hidden.indexed_iter().find(|(_, v)| !v.is_finite()) {
        report.push("hidden", Some(vec![idx.0, idx.1, idx.2]), "non-finite hidden");
    }
    if attn_shape_ok {
        'outer: for layer in 0..layers {
            for i in 0..n {
                for j in 0..=i {
                    if !record.attn[[layer, i, j]].is_finite() {
                        report.push("attn", Some(vec![layer, i, j]), "non-finite attn");
                        break 'outer;
                    }
                }
            }
        }
    }

    if let Some(lp) = &record.logprob {
        if lp.len() != n {
            report.push("logprob", None, format!("expected length {n}, got {}", lp.len()));
        }
        if let Some(pos) = lp.iter().position(|v| !v.is_finite()) {
            report.push("logprob", Some(vec![pos]), "non-finite logprob");
        }
    }

    if let Some(ph) = &record.attn_perhead {
        let s = ph.shape();
        if s[0] != layers || s[2] != n || s[3] != n || s[1] == 0 {
            report.push("attn_perhead", None, format!("shape {:?} inconsistent; expected [{layers}, H, {n}, {n}]", s));
        } else {
            'ph: for layer in 0..s[0] {
                for h in 0..s[1] {
                    for i in 0..n {
                        for j in 0..=i {
                            if !ph[[layer, h, i, j]].is_finite() {
                                report.push("attn_perhead", Some(vec![layer, h, i, j]), "non-finite attn_perhead");
                                break 'ph;
                            }
                        }
                    }
                }
            }
        }
    }
    report
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn push_f32s<'a>(buf: &mut Vec<u8>, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a record to ICRD bytes. Pure function of the record.
pub fn encode_dump(record: &ActivationRecord) -> Result<Vec<u8>> {
    validate_dump(record).into_result()?;

    let mut rec = record.clone();
    rec.zero_upper_triangle();

    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, data: Vec<u8>| {
        let start = align_up(payload.len());
        payload.resize(start, 0);
        payload.extend_from_slice(&data);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype: DTYPE_F32LE.to_string(),
            offset: start as u64,
            length: data.len() as u64,
        });
    };

    let mut bytes = Vec::with_capacity(rec.hidden.len() * 4);
    push_f32s(&mut bytes, rec.hidden.iter());
    add("hidden", rec.hidden.shape().to_vec(), bytes);

    let mut bytes = Vec::with_capacity(rec.attn.len() * 4);
    push_f32s(&mut bytes, rec.attn.iter());
    add("attn", rec.attn.shape().to_vec(), bytes);

    if let Some(lp) = &rec.logprob {
        let mut bytes = Vec::with_capacity(lp.len() * 4);
        push_f32s(&mut bytes, lp.iter());
        add("logprob", vec![lp.len()], bytes);
    }
    if let Some(ph) = &rec.attn_perhead {
        let mut bytes = Vec::with_capacity(ph.len() * 4);
        push_f32s(&mut bytes, ph.iter());
        add("attn_perhead", ph.shape().to_vec(), bytes);
    }

    let header = DumpHeader {
        example_id: rec.example_id.clone(),
        dataset: rec.dataset.clone(),
        n_tokens: rec.n_tokens(),
        n_layers: rec.n_layers(),
        hidden_dim: rec.hidden_dim(),
        answer_span: [rec.answer_span.start, rec.answer_span.end],
        label: rec.label,
        attn_kind: rec.attn_kind,
        tokens: rec.tokens.clone(),
        metadata: rec.metadata.clone(),
        payload_length: payload.len() as u64,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| IcrError::Header(e.to_string()))?;

    let payload_start = align_up(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(payload_start + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes `record` to `path` in ICRD v1 format.
pub fn write_dump(record: &ActivationRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dump(record)?;
    fs::write(path, bytes).map_err(|e| IcrError::io(path, e))
}

/// Reads and validates an ICRD v1 file.
pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IcrError::io(path, e))?;
    decode_dump(&bytes)
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn decode_dump(bytes: &[u8]) -> Result<ActivationRecord> {
    if bytes.len() < 4 {
        return Err(IcrError::Truncated("file shorter than magic".into()));
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != MAGIC {
        return Err(IcrError::BadMagic { expected: MAGIC, found });
    }
    if bytes.len() < PREAMBLE {
        return Err(IcrError::Truncated("file shorter than preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(IcrError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end =
        PREAMBLE.checked_add(header_len).ok_or_else(|| IcrError::Header("header length overflows".into()))?;
    if header_end > bytes.len() {
        return Err(IcrError::Truncated(format!("header needs {header_end} bytes, file has {}", bytes.len())));
    }
    let header: DumpHeader =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| IcrError::Header(e.to_string()))?;

    let payload_start = align_up(header_end);
    let payload_len = header.payload_length as usize;
    let available = bytes.len().saturating_sub(payload_start);
    if available < payload_len {
        return Err(IcrError::Truncated(format!("payload declares {payload_len} bytes, file has {available}")));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];

    // Directory sanity: aligned, in bounds, sized to shape, non-overlapping.
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for t in &header.tensors {
        if t.dtype != DTYPE_F32LE {
            return Err(IcrError::Header(format!("tensor {:?} has dtype {:?}", t.name, t.dtype)));
        }
        if t.offset % ALIGN as u64 != 0 {
            return Err(IcrError::DirectoryOutOfBounds(format!(
                "tensor {:?} offset {} not {ALIGN}-byte aligned",
                t.name, t.offset
            )));
        }
        let expected = t.shape.iter().product::<usize>() as u64 * 4;
        if t.length != expected {
            return Err(IcrError::DirectoryOutOfBounds(format!(
                "tensor {:?} length {} does not match shape {:?}",
                t.name, t.length, t.shape
            )));
        }
        let end = t
            .offset
            .checked_add(t.length)
            .ok_or_else(|| IcrError::DirectoryOutOfBounds(format!("tensor {:?} extent overflows", t.name)))?;
        if end > payload_len as u64 {
            return Err(IcrError::DirectoryOutOfBounds(format!(
                "tensor {:?} ends at {end}, payload is {payload_len} bytes",
                t.name
            )));
        }
        spans.push((t.offset, end, &t.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(IcrError::DirectoryOutOfBounds(format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2)));
        }
    }

    let tensor = |name: &str| -> Option<(&TensorEntry, Vec<f32>)> {
        header.tensors.iter().find(|t| t.name == name).map(|t| {
            let start = t.offset as usize;
            (t, f32s(&payload[start..start + t.length as usize]))
        })
    };
    let shape_err =
        |name: &str, shape: &[usize]| IcrError::Header(format!("tensor {name:?} has unexpected shape {shape:?}"));

    let (t, data) = tensor("hidden").ok_or_else(|| IcrError::MissingTensor("hidden".into()))?;
    let hidden = match t.shape.as_slice() {
        &[a, b, c] => Array3::from_shape_vec((a, b, c), data).expect("length checked"),
        s => return Err(shape_err("hidden", s)),
    };
    let (t, data) = tensor("attn").ok_or_else(|| IcrError::MissingTensor("attn".into()))?;
    let attn = match t.shape.as_slice() {
        &[a, b, c] => Array3::from_shape_vec((a, b, c), data).expect("length checked"),
        s => return Err(shape_err("attn", s)),
    };
    let logprob = match tensor("logprob") {
        None => None,
        Some((t, data)) => match t.shape.as_slice() {
            &[_] => Some(data),
            s => return Err(shape_err("logprob", s)),
        },
    };
    let attn_perhead = match tensor("attn_perhead") {
        None => None,
        Some((t, data)) => match t.shape.as_slice() {
            &[a, b, c, d] => Some(Array4::from_shape_vec((a, b, c, d), data).expect("length checked")),
            s => return Err(shape_err("attn_perhead", s)),
        },
    };

    let record = ActivationRecord {
        example_id: header.example_id,
        dataset: header.dataset,
        hidden,
        attn,
        attn_perhead,
        attn_kind: header.attn_kind,
        answer_span: AnswerSpan::new(header.answer_span[0], header.answer_span[1]),
        label: header.label,
        logprob,
        tokens: header.tokens,
        metadata: header.metadata,
    };
    if record.n_tokens() != header.n_tokens
        || record.n_layers() != header.n_layers
        || record.hidden_dim() != header.hidden_dim
    {
        return Err(IcrError::Header("scalar dimensions disagree with tensor shapes".into()));
    }
    validate_dump(&record).into_result()?;
    Ok(record)
}
