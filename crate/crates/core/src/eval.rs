// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation harness: AUROC, per-layer AUROC curves, probe evaluation over
//! repeated seeds, cross-dataset generalization grids, component and
//! layer-group ablations, token-level detection, and two cheap baselines
//! (answer perplexity and attention-kernel log-determinant).
//!
//! Label convention throughout: 1 = hallucinated is the positive class and
//! a higher score means "more likely hallucinated".

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationRecord, AnswerSpan};
use crate::error::{IcrError, Result};
use crate::exec::Exec;
use crate::probe::{column_subset, score_rows, stratified_split, train_probe, ProbeConfig, ProbeModel};
use crate::report::Table;
use crate::score::{icr_matrix_with, pool_features, pool_record, IcrMatrix, IcrMode, IcrSetting, Pooling};
use crate::seeds::run_seeds;

/// Rank-based (Mann-Whitney) AUROC with ties counted one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(IcrError::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    if let Some(index) = scores.iter().position(|s| s.is_nan()) {
        return Err(IcrError::NonFinite { index });
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(IcrError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Doubled mid-ranks keep everything in exact integer arithmetic.
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end, midrank*2 = start + 1 + end
        let doubled_mid = (start + 1 + end) as u64;
        let positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled_mid * positives;
        start = end;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

/// Per-layer AUROC of the pooled single-layer score, oriented per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseAuroc {
    /// `max(a, 1 - a)` per layer.
    pub auroc: Vec<f64>,
    /// AUROC with high score = hallucinated.
    pub raw: Vec<f64>,
    /// Whether the layer's direction was flipped.
    pub flipped: Vec<bool>,
}

impl LayerwiseAuroc {
    pub fn best_layer(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.auroc.iter().enumerate() {
            if a > self.auroc[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(vec!["auroc".into(), "raw_auroc".into(), "flipped".into()]);
        for (l, ((a, r), f)) in self.auroc.iter().zip(&self.raw).zip(&self.flipped).enumerate() {
            t.push_row(format!("layer_{}", l + 1), vec![*a, *r, if *f { 1.0 } else { 0.0 }]);
        }
        t
    }
}

/// Per-layer AUROC over pooled features `(M, L)`.
pub fn layerwise_auroc(features: ArrayView2<'_, f64>, labels: &[u8]) -> Result<LayerwiseAuroc> {
    let mut out = LayerwiseAuroc { auroc: Vec::new(), raw: Vec::new(), flipped: Vec::new() };
    for col in features.axis_iter(Axis(1)) {
        let a = auroc(&col.to_vec(), labels)?;
        let flip = a < 0.5;
        out.raw.push(a);
        out.flipped.push(flip);
        out.auroc.push(if flip { 1.0 - a } else { a });
    }
    Ok(out)
}

/// Pools each matrix over its span, then runs [`layerwise_auroc`].
pub fn layerwise_auroc_from_matrices(
    matrices: &[IcrMatrix],
    spans: &[AnswerSpan],
    labels: &[u8],
) -> Result<LayerwiseAuroc> {
    let features = pooled_matrix(matrices, spans)?;
    layerwise_auroc(features.view(), labels)
}

fn pooled_matrix(matrices: &[IcrMatrix], spans: &[AnswerSpan]) -> Result<Array2<f64>> {
    if matrices.len() != spans.len() {
        return Err(IcrError::DimensionMismatch { expected: matrices.len(), got: spans.len() });
    }
    let layers = matrices.first().map_or(0, |m| m.n_layers());
    let mut out = Array2::zeros((matrices.len(), layers));
    for (i, (m, s)) in matrices.iter().zip(spans).enumerate() {
        if m.n_layers() != layers {
            return Err(IcrError::DimensionMismatch { expected: layers, got: m.n_layers() });
        }
        let f = pool_features(m, *s)?;
        out.row_mut(i).assign(&ndarray::Array1::from(f.values));
    }
    Ok(out)
}

/// How probes are trained and scored: an 80/20 stratified split drawn from
/// `split_seed`, then one probe per seed, AUROC averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub test_fraction: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl EvalProtocol {
    /// `runs` seeds starting at `seed`; the split is drawn from `seed` too.
    pub fn new(seed: u64, runs: usize) -> Self {
        Self {
            probe: ProbeConfig::new(1, seed),
            seeds: run_seeds(seed, runs.max(1)),
            split_seed: seed,
            test_fraction: 0.2,
            exec: Exec::auto(),
        }
    }

    pub fn split(&self, labels: &[u8]) -> (Vec<usize>, Vec<usize>) {
        stratified_split(labels, self.test_fraction, self.split_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub per_run_auroc: Vec<f64>,
    pub per_layer_auroc: Vec<f64>,
    /// Test-split logits of the first run.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub dataset: String,
    pub setting: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(vec!["auroc".into()]);
        t.push_row("mean", vec![self.auroc]);
        for (s, a) in self.seeds.iter().zip(&self.per_run_auroc) {
            t.push_row(format!("seed_{s}"), vec![*a]);
        }
        t
    }
}

fn rows_of(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn labels_of(y: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| y[i]).collect()
}

/// Trains one probe per protocol seed on `train` and returns them in seed order.
pub fn train_runs(x_train: ArrayView2<'_, f64>, y_train: &[u8], protocol: &EvalProtocol) -> Result<Vec<ProbeModel>> {
    let cfg = protocol.probe.with_input_dim(x_train.ncols());
    protocol.exec.try_map(protocol.seeds.len(), |r| {
        train_probe(x_train, y_train, &cfg.with_seed(protocol.seeds[r])).map(|(m, _)| m)
    })
}

/// Train/test evaluation of the probe on one feature set.
pub fn evaluate_features(features: ArrayView2<'_, f64>, labels: &[u8], protocol: &EvalProtocol) -> Result<EvalReport> {
    if features.nrows() != labels.len() {
        return Err(IcrError::DimensionMismatch { expected: features.nrows(), got: labels.len() });
    }
    let (train, test) = protocol.split(labels);
    let x_tr = rows_of(features, &train);
    let y_tr = labels_of(labels, &train);
    let x_te = rows_of(features, &test);
    let y_te = labels_of(labels, &test);
    let models = train_runs(x_tr.view(), &y_tr, protocol)?;
    let mut per_run = Vec::with_capacity(models.len());
    let mut first_scores = Vec::new();
    for (r, m) in models.iter().enumerate() {
        let s = score_rows(m, x_te.view())?;
        per_run.push(auroc(&s, &y_te)?);
        if r == 0 {
            first_scores = s;
        }
    }
    let per_layer = layerwise_auroc(x_te.view(), &y_te)?.auroc;
    Ok(EvalReport {
        auroc: mean(&per_run),
        per_run_auroc: per_run,
        per_layer_auroc: per_layer,
        scores: first_scores,
        labels: y_te,
        dataset: String::new(),
        setting: String::new(),
        seeds: protocol.seeds.clone(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Relative AUROC drop from in-domain to cross-domain, in percent.
pub fn average_drop_percent(in_domain: f64, cross_domain: f64) -> f64 {
    (in_domain - cross_domain) / in_domain * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub datasets: Vec<String>,
    /// `grid[train][test]`.
    pub grid: Vec<Vec<f64>>,
    pub avg_in_domain: f64,
    pub avg_cross_domain: f64,
    pub avg_drop_percent: f64,
}

impl GeneralizationMatrix {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(self.datasets.clone());
        for (name, row) in self.datasets.iter().zip(&self.grid) {
            t.push_row(name.clone(), row.clone());
        }
        t
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(vec!["value".into()]);
        t.push_row("avg_in_domain", vec![self.avg_in_domain]);
        t.push_row("avg_cross_domain", vec![self.avg_cross_domain]);
        t.push_row("avg_drop_percent", vec![self.avg_drop_percent]);
        t
    }
}

/// A named feature set.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

/// Trains on each row dataset's train split and tests on every column
/// dataset's test split; cells average AUROC over the protocol seeds.
/// The diagonal equals [`evaluate_features`] on that dataset.
pub fn generalization_matrix(sets: &[FeatureSet], protocol: &EvalProtocol) -> Result<GeneralizationMatrix> {
    if sets.len() < 2 {
        return Err(IcrError::Config("a generalization grid needs at least two datasets".into()));
    }
    let width = sets[0].features.ncols();
    for s in sets {
        if s.features.ncols() != width {
            return Err(IcrError::DimensionMismatch { expected: width, got: s.features.ncols() });
        }
    }
    let splits: Vec<_> = sets.iter().map(|s| protocol.split(&s.labels)).collect();
    let tests: Vec<(Array2<f64>, Vec<u8>)> = sets
        .iter()
        .zip(&splits)
        .map(|(s, (_, te))| (rows_of(s.features.view(), te), labels_of(&s.labels, te)))
        .collect();

    let runs = protocol.seeds.len();
    let cfg = protocol.probe.with_input_dim(width);
    // One task per (train dataset, seed).
    let cells = protocol.exec.try_map(sets.len() * runs, |task| {
        let (d, r) = (task / runs, task % runs);
        let (train, _) = &splits[d];
        let x = rows_of(sets[d].features.view(), train);
        let y = labels_of(&sets[d].labels, train);
        let (model, _) = train_probe(x.view(), &y, &cfg.with_seed(protocol.seeds[r]))?;
        tests.iter().map(|(xt, yt)| auroc(&score_rows(&model, xt.view())?, yt)).collect::<Result<Vec<f64>>>()
    })?;

    let n = sets.len();
    let mut grid = vec![vec![0.0; n]; n];
    for (d, row) in grid.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let vals: Vec<f64> = (0..runs).map(|r| cells[d * runs + r][c]).collect();
            *cell = mean(&vals);
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| grid[i][i]).collect();
    let off: Vec<f64> =
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| grid[i][j]).collect();
    let avg_in = mean(&diag);
    let avg_cross = mean(&off);
    Ok(GeneralizationMatrix {
        datasets: sets.iter().map(|s| s.name.clone()).collect(),
        grid,
        avg_in_domain: avg_in,
        avg_cross_domain: avg_cross,
        avg_drop_percent: average_drop_percent(avg_in, avg_cross),
    })
}

/// Pooled features for every record under one ICR setting.
pub fn record_features(
    records: &[ActivationRecord],
    setting: IcrSetting,
    pooling: Pooling,
    exec: Exec,
) -> Result<Array2<f64>> {
    let layers = records.first().map_or(0, |r| r.n_layers());
    let rows = exec.try_map(records.len(), |i| {
        let r = &records[i];
        if r.n_layers() != layers {
            return Err(IcrError::DimensionMismatch { expected: layers, got: r.n_layers() });
        }
        // Records are the parallel unit here; layers run sequentially inside.
        let m = icr_matrix_with(r, setting, Exec::Sequential)?;
        Ok(pool_record(&m, r, pooling)?.values)
    })?;
    let mut out = Array2::zeros((records.len(), layers));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

fn mode_row_name(mode: IcrMode) -> &'static str {
    match mode {
        IcrMode::None => "NONE",
        IcrMode::HsOnly => "HS_ONLY",
        IcrMode::Full => "FULL",
    }
}

/// AUROC per ICR setting (rows `NONE`, `HS_ONLY`, `FULL`) and per dataset
/// tag of the records (columns, sorted).
pub fn run_component_ablation(
    records: &[ActivationRecord],
    top_k: usize,
    pooling: Pooling,
    protocol: &EvalProtocol,
) -> Result<Table> {
    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_dataset.entry(r.dataset.as_str()).or_default().push(i);
    }
    let mut table = Table::new(by_dataset.keys().map(|s| s.to_string()).collect());
    for mode in IcrMode::ALL {
        let setting = IcrSetting::new(mode, top_k)?;
        let mut row = Vec::new();
        for idx in by_dataset.values() {
            let subset: Vec<ActivationRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            let labels: Vec<u8> = subset.iter().map(|r| r.label).collect();
            let x = record_features(&subset, setting, pooling, protocol.exec)?;
            row.push(evaluate_features(x.view(), &labels, protocol)?.auroc);
        }
        table.push_row(mode_row_name(mode), row);
    }
    Ok(table)
}

/// Early / middle / deep layer groups, 1-based inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub early: RangeInclusive<usize>,
    pub middle: RangeInclusive<usize>,
    pub deep: RangeInclusive<usize>,
}

impl LayerGroups {
    /// 1-14 / 15-28 / 29-L when the model is deep enough, else thirds.
    pub fn for_layers(layers: usize) -> Self {
        if layers >= 29 {
            Self { early: 1..=14, middle: 15..=28, deep: 29..=layers }
        } else {
            let a = layers.div_ceil(3);
            let b = (2 * layers).div_ceil(3);
            Self { early: 1..=a, middle: (a + 1)..=b, deep: (b + 1)..=layers }
        }
    }

    pub fn named(&self) -> [(&'static str, &RangeInclusive<usize>); 3] {
        [("early", &self.early), ("middle", &self.middle), ("deep", &self.deep)]
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let mut seen = vec![false; layers + 1];
        for (name, g) in self.named() {
            for l in g.clone() {
                if l == 0 || l > layers {
                    return Err(IcrError::Config(format!("{name} group layer {l} outside 1..={layers}")));
                }
                if seen[l] {
                    return Err(IcrError::Config(format!("layer {l} is in more than one group")));
                }
                seen[l] = true;
            }
        }
        Ok(())
    }
}

/// Feature columns left after deleting `group` (1-based layers).
pub fn remaining_columns(layers: usize, group: &RangeInclusive<usize>) -> Vec<usize> {
    (0..layers).filter(|c| !group.contains(&(c + 1))).collect()
}

/// Deletes the named group's columns.
pub fn remove_group(features: ArrayView2<'_, f64>, group: &RangeInclusive<usize>) -> Result<Array2<f64>> {
    let keep = remaining_columns(features.ncols(), group);
    if keep.is_empty() {
        return Err(IcrError::Config("removing the group leaves no features".into()));
    }
    Ok(column_subset(features, &keep))
}

/// AUROC with all layers and with each group removed (4 rows).
pub fn run_layer_ablation(
    features: ArrayView2<'_, f64>,
    labels: &[u8],
    groups: &LayerGroups,
    protocol: &EvalProtocol,
) -> Result<Table> {
    groups.validate(features.ncols())?;
    let mut t = Table::new(vec!["auroc".into(), "n_features".into()]);
    let full = evaluate_features(features, labels, protocol)?;
    t.push_row("all_layers", vec![full.auroc, features.ncols() as f64]);
    for (name, g) in groups.named() {
        let reduced = remove_group(features, g)?;
        let r = evaluate_features(reduced.view(), labels, protocol)?;
        t.push_row(format!("without_{name}"), vec![r.auroc, reduced.ncols() as f64]);
    }
    Ok(t)
}

/// Per-token hallucination probabilities: each matrix row goes through the
/// sequence-trained probe on its own.
pub fn token_level_detect(model: &ProbeModel, matrix: &IcrMatrix) -> Result<Vec<f64>> {
    (0..matrix.n_tokens()).map(|i| model.predict(&matrix.row(i))).collect()
}

/// `exp(-mean(logprob))` over the given log-probabilities.
pub fn baseline_ppl(logprob: &[f64]) -> Result<f64> {
    if logprob.is_empty() {
        return Err(IcrError::EmptySpan);
    }
    if let Some(index) = logprob.iter().position(|v| !v.is_finite()) {
        return Err(IcrError::NonFinite { index });
    }
    Ok((-mean(logprob)).exp())
}

/// Answer-span perplexity of a record.
pub fn record_ppl(record: &ActivationRecord) -> Result<f64> {
    let lp = record.logprob.as_ref().ok_or_else(|| IcrError::MissingTensor("logprob".into()))?;
    let span: Vec<f64> = record.answer_span.range().map(|i| lp[i] as f64).collect();
    baseline_ppl(&span)
}

/// `sum_j log K_jj` of one lower-triangular kernel map, given its diagonal.
pub fn kernel_logdet(diagonal: &[f64]) -> std::result::Result<f64, usize> {
    let mut total = 0.0;
    for (j, &v) in diagonal.iter().enumerate() {
        if v.is_nan() || v <= 0.0 {
            return Err(j);
        }
        total += v.ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogdetScore {
    pub score: f64,
    pub layers: usize,
    pub heads: usize,
}

/// Mean over heads of per-head kernel log-determinants.
pub fn mean_head_logdet(per_head_diagonals: &[Vec<f64>]) -> Result<f64> {
    if per_head_diagonals.is_empty() {
        return Err(IcrError::Config("no heads".into()));
    }
    let mut sum = 0.0;
    for (h, d) in per_head_diagonals.iter().enumerate() {
        sum += kernel_logdet(d).map_err(|position| IcrError::NonPositiveDiagonal { layer: 0, head: h, position })?;
    }
    Ok(sum / per_head_diagonals.len() as f64)
}

/// Attention-kernel log-determinant score. Each head's kernel is the causal
/// softmax of its stored scores; its diagonal gives the log-determinant.
/// Averaged over heads and then over layers.
pub fn baseline_attn_logdet(record: &ActivationRecord) -> Result<LogdetScore> {
    let ph = record.attn_perhead.as_ref().ok_or_else(|| IcrError::MissingTensor("attn_perhead".into()))?;
    let s = ph.shape();
    let (layers, heads, n) = (s[0], s[1], s[2]);
    let mut layer_sum = 0.0;
    for l in 0..layers {
        let mut head_sum = 0.0;
        for h in 0..heads {
            let mut diag = Vec::with_capacity(n);
            for i in 0..n {
                let row: Vec<f64> = (0..=i).map(|j| ph[[l, h, i, j]] as f64).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                diag.push((row[i] - max).exp() / z);
            }
            head_sum += kernel_logdet(&diag).map_err(|position| IcrError::NonPositiveDiagonal {
                layer: l,
                head: h,
                position,
            })?;
        }
        layer_sum += head_sum / heads as f64;
    }
    Ok(LogdetScore { score: layer_sum / layers as f64, layers, heads })
}
