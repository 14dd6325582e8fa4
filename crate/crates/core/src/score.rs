// SPDX-License-Identifier: MIT OR Apache-2.0

//! ICR score: per-token, per-layer divergence between where the residual
//! update points (projection distribution) and where attention looks
//! (attention distribution), restricted to the top-k attended tokens.
//!
//! For token `i` at layer `l` (1-based):
//!
//! 1. `attn_i = softmax(A[l-1][i][0..=i])`, the causal attention distribution.
//! 2. `dx_i = x[l][i] - x[l-1][i]`, the residual update.
//! 3. `p_ij = <dx_i, x[l][j]> / |x[l][j]|` for `j <= i`, then `proj_i = softmax(p_i)`.
//! 4. `S` = indices of the `k` largest entries of `attn_i` (ties to the lower index).
//! 5. `ICR = JSD(proj_i[S] / sum, attn_i[S] / sum)` in bits.
//!
//! Everything is computed in `f64` regardless of the stored precision.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationRecord, AnswerSpan, AttnKind};
use crate::error::{IcrError, Result};
use crate::exec::Exec;

pub const DEFAULT_TOP_K: usize = 20;

const SUM_TOL: f64 = 1e-6;

/// Which signals feed the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcrMode {
    /// Projection distribution against the attention distribution.
    Full,
    /// Attention replaced by a uniform distribution over the causal support.
    HsOnly,
    /// Score is identically zero.
    None,
}

impl IcrMode {
    pub const ALL: [IcrMode; 3] = [IcrMode::None, IcrMode::HsOnly, IcrMode::Full];
}

impl fmt::Display for IcrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IcrMode::Full => "full",
            IcrMode::HsOnly => "hs-only",
            IcrMode::None => "none",
        })
    }
}

impl FromStr for IcrMode {
    type Err = IcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" | "hs+attn" => Ok(IcrMode::Full),
            "hs-only" => Ok(IcrMode::HsOnly),
            "none" => Ok(IcrMode::None),
            other => Err(IcrError::Config(format!("unknown ICR setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcrSetting {
    pub mode: IcrMode,
    pub top_k: usize,
}

impl Default for IcrSetting {
    fn default() -> Self {
        Self { mode: IcrMode::Full, top_k: DEFAULT_TOP_K }
    }
}

impl IcrSetting {
    pub fn new(mode: IcrMode, top_k: usize) -> Result<Self> {
        if top_k == 0 {
            return Err(IcrError::Config("top_k must be at least 1".into()));
        }
        Ok(Self { mode, top_k })
    }
}

/// `(N, L)` matrix of scores; entry `(i, l - 1)` is the score of token `i`
/// (0-based) at decoder layer `l` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct IcrMatrix {
    pub scores: Array2<f64>,
}

impl IcrMatrix {
    pub fn n_tokens(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, token: usize) -> Vec<f64> {
        self.scores.row(token).to_vec()
    }

    /// CSV with header `layer_1,...,layer_L` and one row per token.
    pub fn to_csv(&self) -> String {
        let mut out = layer_header(self.n_layers());
        for row in self.scores.rows() {
            push_row(&mut out, row.iter());
        }
        out
    }
}

/// Pooled length-`L` feature vector for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcrFeature {
    pub values: Vec<f64>,
}

/// Token set used when pooling a matrix into a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Answer tokens only.
    #[default]
    Answer,
    /// Every token in the sequence.
    All,
}

impl FromStr for Pooling {
    type Err = IcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "answer" => Ok(Pooling::Answer),
            "all" => Ok(Pooling::All),
            other => Err(IcrError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

pub(crate) fn layer_header(layers: usize) -> String {
    let cols: Vec<String> = (1..=layers).map(|l| format!("layer_{l}")).collect();
    let mut s = cols.join(",");
    s.push('\n');
    s
}

pub(crate) fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let cells: Vec<String> = values.map(|v| v.to_string()).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of `attn_row[0..=i]`: the attention distribution of token `i`
/// over its causal support. Entries past `i` are never read.
pub fn causal_attention_distribution<T: Copy + Into<f64>>(attn_row: &[T], i: usize) -> Result<Vec<f64>> {
    if i >= attn_row.len() {
        return Err(IcrError::OutOfRange(format!("token {i} outside row of length {}", attn_row.len())));
    }
    let mut v: Vec<f64> = attn_row[..=i].iter().map(|&x| x.into()).collect();
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(IcrError::NonFinite { index });
    }
    softmax_in_place(&mut v);
    Ok(v)
}

/// Row of already-normalized weights restricted to the causal support and
/// renormalized. Used for dumps captured after the model's own softmax.
fn causal_weight_distribution(attn_row: &[f32], i: usize) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = attn_row[..=i].iter().map(|&x| x as f64).collect();
    if let Some(index) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(IcrError::NonFinite { index });
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(IcrError::NotADistribution(format!("post-softmax attention row {i} sums to zero")));
    }
    v.iter_mut().for_each(|x| *x /= sum);
    Ok(v)
}

/// Residual update `x_curr - x_prev`.
pub fn delta_hidden<T: Copy + Into<f64>>(x_prev: &[T], x_curr: &[T]) -> Result<Vec<f64>> {
    if x_prev.len() != x_curr.len() {
        return Err(IcrError::DimensionMismatch { expected: x_prev.len(), got: x_curr.len() });
    }
    Ok(x_prev.iter().zip(x_curr).map(|(&a, &b)| b.into() - a.into()).collect())
}

fn norm<T: Copy + Into<f64>>(v: impl Iterator<Item = T>) -> f64 {
    v.map(|x| {
        let x: f64 = x.into();
        x * x
    })
    .sum::<f64>()
    .sqrt()
}

/// Scalar projection lengths `<delta, x_j> / |x_j|` for `j in 0..=i`.
pub fn raw_projections<T: Copy + Into<f64>>(
    delta: &[f64],
    layer_hidden: ArrayView2<'_, T>,
    i: usize,
) -> Result<Vec<f64>> {
    let norms: Vec<f64> = (0..=i.min(layer_hidden.nrows().saturating_sub(1)))
        .map(|j| norm(layer_hidden.row(j).iter().copied()))
        .collect();
    projections_with_norms(delta, layer_hidden, &norms, i)
}

fn projections_with_norms<T: Copy + Into<f64>>(
    delta: &[f64],
    layer_hidden: ArrayView2<'_, T>,
    norms: &[f64],
    i: usize,
) -> Result<Vec<f64>> {
    if i >= layer_hidden.nrows() {
        return Err(IcrError::OutOfRange(format!("token {i} outside {} context states", layer_hidden.nrows())));
    }
    if delta.len() != layer_hidden.ncols() {
        return Err(IcrError::DimensionMismatch { expected: layer_hidden.ncols(), got: delta.len() });
    }
    (0..=i)
        .map(|j| {
            let n = norms[j];
            if n == 0.0 {
                return Err(IcrError::ZeroNorm { token: j });
            }
            let dot: f64 = delta.iter().zip(layer_hidden.row(j).iter()).map(|(&a, &b)| a * b.into()).sum();
            Ok(dot / n)
        })
        .collect()
}

/// Softmax over the causal support of the projection lengths of `delta`
/// onto each context state `layer_hidden[j]`, `j <= i`.
pub fn projection_distribution<T: Copy + Into<f64>>(
    delta: &[f64],
    layer_hidden: ArrayView2<'_, T>,
    i: usize,
) -> Result<Vec<f64>> {
    let mut p = raw_projections(delta, layer_hidden, i)?;
    softmax_in_place(&mut p);
    Ok(p)
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(index) = p.iter().position(|x| !x.is_finite()) {
        return Err(IcrError::NonFinite { index });
    }
    if p.iter().any(|&x| x < 0.0) {
        return Err(IcrError::NotADistribution(format!("{name} has a negative entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(IcrError::NotADistribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
/// Uses `0 * log 0 = 0`; no smoothing.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(IcrError::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            // Symmetric in (a, b): addition commutes exactly in IEEE-754.
            term(a, m) + term(b, m)
        })
        .sum();
    Ok((0.5 * total).clamp(0.0, 1.0))
}

/// Indices of the `k` largest entries of `weights`, ties to the lower index,
/// returned in ascending index order.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    if k < weights.len() {
        idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

fn renormalized_slice(v: &[f64], idx: &[usize]) -> Vec<f64> {
    let sum: f64 = idx.iter().map(|&j| v[j]).sum();
    idx.iter().map(|&j| v[j] / sum).collect()
}

/// Restricts both distributions to the top-`k` indices of `attn_dist` and
/// renormalizes each slice. When `k` covers the whole support the inputs are
/// returned unchanged.
pub fn top_k_restrict(attn_dist: &[f64], proj_dist: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if attn_dist.len() != proj_dist.len() {
        return Err(IcrError::DimensionMismatch { expected: attn_dist.len(), got: proj_dist.len() });
    }
    if k == 0 {
        return Err(IcrError::Config("top_k must be at least 1".into()));
    }
    if k >= attn_dist.len() {
        return Ok((attn_dist.to_vec(), proj_dist.to_vec()));
    }
    let idx = top_k_indices(attn_dist, k);
    Ok((renormalized_slice(attn_dist, &idx), renormalized_slice(proj_dist, &idx)))
}

/// Per-layer view shared by every token of that layer.
struct LayerContext<'a> {
    record: &'a ActivationRecord,
    layer: usize,
    norms: Vec<f64>,
}

impl<'a> LayerContext<'a> {
    fn new(record: &'a ActivationRecord, layer: usize) -> Self {
        let ctx = record.hidden.index_axis(Axis(0), layer);
        let norms = ctx.rows().into_iter().map(|r| norm(r.iter().copied())).collect();
        Self { record, layer, norms }
    }

    fn score(&self, i: usize, setting: IcrSetting) -> Result<f64> {
        if setting.mode == IcrMode::None || i == 0 {
            return Ok(0.0);
        }
        let rec = self.record;
        let l = self.layer;
        let curr = rec.hidden.index_axis(Axis(0), l);
        let prev = rec.hidden.index_axis(Axis(0), l - 1);
        let delta = delta_hidden(
            prev.row(i).as_slice().expect("standard layout"),
            curr.row(i).as_slice().expect("standard layout"),
        )?;
        let mut proj = projections_with_norms(&delta, curr, &self.norms, i)?;
        softmax_in_place(&mut proj);

        let attn = match setting.mode {
            IcrMode::Full => {
                let row = rec.attn.index_axis(Axis(0), l - 1);
                let row = row.row(i);
                let row = row.as_slice().expect("standard layout");
                match rec.attn_kind {
                    AttnKind::PreSoftmax => causal_attention_distribution(row, i)?,
                    AttnKind::PostSoftmax => causal_weight_distribution(row, i)?,
                }
            }
            IcrMode::HsOnly => vec![1.0 / (i + 1) as f64; i + 1],
            IcrMode::None => unreachable!(),
        };
        let (a, p) = top_k_restrict(&attn, &proj, setting.top_k)?;
        jsd(&p, &a)
    }
}

fn check_layer_token(record: &ActivationRecord, layer: usize, i: usize) -> Result<()> {
    if layer == 0 || layer > record.n_layers() {
        return Err(IcrError::OutOfRange(format!("layer {layer} outside 1..={}", record.n_layers())));
    }
    if i >= record.n_tokens() {
        return Err(IcrError::OutOfRange(format!("token {i} outside 0..{}", record.n_tokens())));
    }
    Ok(())
}

/// Score of token `i` at decoder layer `layer` (1-based).
pub fn icr_score_token(record: &ActivationRecord, layer: usize, i: usize, setting: IcrSetting) -> Result<f64> {
    check_layer_token(record, layer, i)?;
    LayerContext::new(record, layer).score(i, setting)
}

/// Full `(N, L)` score matrix using the crate's default execution strategy.
pub fn icr_matrix(record: &ActivationRecord, setting: IcrSetting) -> Result<IcrMatrix> {
    icr_matrix_with(record, setting, Exec::auto())
}

/// Full `(N, L)` score matrix; layers are the unit of parallel work.
pub fn icr_matrix_with(record: &ActivationRecord, setting: IcrSetting, exec: Exec) -> Result<IcrMatrix> {
    if setting.top_k == 0 {
        return Err(IcrError::Config("top_k must be at least 1".into()));
    }
    let n = record.n_tokens();
    let layers = record.n_layers();
    let columns = exec.try_map(layers, |l| {
        let ctx = LayerContext::new(record, l + 1);
        (0..n).map(|i| ctx.score(i, setting)).collect::<Result<Vec<f64>>>()
    })?;
    let mut scores = Array2::zeros((n, layers));
    for (l, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            scores[[i, l]] = v;
        }
    }
    Ok(IcrMatrix { scores })
}

/// Mean of matrix rows over `span`.
pub fn pool_features(matrix: &IcrMatrix, span: AnswerSpan) -> Result<IcrFeature> {
    if span.is_empty() {
        return Err(IcrError::EmptySpan);
    }
    if span.end > matrix.n_tokens() {
        return Err(IcrError::OutOfRange(format!(
            "span [{}, {}) exceeds {} tokens",
            span.start,
            span.end,
            matrix.n_tokens()
        )));
    }
    let count = span.len() as f64;
    let values =
        (0..matrix.n_layers()).map(|l| span.range().map(|i| matrix.scores[[i, l]]).sum::<f64>() / count).collect();
    Ok(IcrFeature { values })
}

/// Pools according to `pooling`, using the record's answer span.
pub fn pool_record(matrix: &IcrMatrix, record: &ActivationRecord, pooling: Pooling) -> Result<IcrFeature> {
    let span = match pooling {
        Pooling::Answer => record.answer_span,
        Pooling::All => AnswerSpan::new(0, matrix.n_tokens()),
    };
    pool_features(matrix, span)
}

/// Score matrix and pooled feature for one record.
pub fn record_feature(
    record: &ActivationRecord,
    setting: IcrSetting,
    pooling: Pooling,
    exec: Exec,
) -> Result<IcrFeature> {
    let m = icr_matrix_with(record, setting, exec)?;
    pool_record(&m, record, pooling)
}
