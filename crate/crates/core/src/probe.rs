// SPDX-License-Identifier: MIT OR Apache-2.0

//! MLP probe over pooled ICR features.
//!
//! Architecture `(L, 128, 64, 32, 1)`: every hidden layer is
//! affine -> batchnorm -> leaky ReLU -> dropout, and the head is
//! affine -> sigmoid. Forward and backward passes are written out by hand in
//! `f64`; training uses Adam with a reduce-on-plateau schedule driven by a
//! stratified validation split.
//!
//! A trained model is frozen: it is switched to eval mode and its parameters
//! are rounded to `f32`, so a checkpoint (which stores `f32`) reloads to the
//! exact same predictions.

pub mod checkpoint;
pub mod logistic;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};
use crate::seeds::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub plateau_threshold: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![128, 64, 32],
            leaky_slope: 0.01,
            dropout: 0.3,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            val_fraction: 0.1,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_input_dim(&self, input_dim: usize) -> Self {
        Self { input_dim, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IcrError::Config(m.to_string()));
        if self.input_dim == 0 {
            return bad("input dimension must be positive");
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden widths must be positive");
        }
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return bad("dropout must lie in [0, 1)");
        }
        if !unit(self.learning_rate)
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !unit(self.plateau_factor)
            || !unit(self.bn_momentum)
            || !unit(self.val_fraction)
            || !unit(self.leaky_slope)
        {
            return bad("rates must lie in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_widths);
        w.push(1);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    /// Hidden layers followed by the output layer.
    pub linears: Vec<Linear>,
    /// One per hidden layer.
    pub norms: Vec<BatchNorm>,
    pub training: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients with the same layout as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrads {
    pub linears: Vec<Linear>,
    /// `(d gamma, d beta)` per hidden layer.
    pub norms: Vec<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Kaiming-normal (fan-in, leaky-ReLU gain) weights, zero biases, unit
/// batchnorm scale, zero shift, running statistics `(0, 1)`.
pub fn init_probe(config: &ProbeConfig) -> Result<ProbeModel> {
    config.validate()?;
    let mut r = rng(derive_seed(config.seed, 0));
    let widths = config.widths();
    let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
    let linears = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            Linear {
                weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut r)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    let norms = config
        .hidden_widths
        .iter()
        .map(|&w| BatchNorm {
            gamma: Array1::ones(w),
            beta: Array1::zeros(w),
            running_mean: Array1::zeros(w),
            running_var: Array1::ones(w),
        })
        .collect();
    Ok(ProbeModel { config: config.clone(), linears, norms, training: true })
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep predictions strictly inside (0, 1).
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy (natural log) from logits.
pub fn bce_from_logits(logits: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| softplus(z) - z * y as f64).sum();
    total / logits.len() as f64
}

/// Inverted-dropout keep masks for every hidden layer, drawn in layer,
/// row, column order from `seed`.
fn dropout_masks(config: &ProbeConfig, batch: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut r = rng(seed);
    let keep = 1.0 - config.dropout;
    config
        .hidden_widths
        .iter()
        .map(|&w| {
            Array2::from_shape_simple_fn((batch, w), || {
                if config.dropout == 0.0 || r.gen::<f64>() >= config.dropout {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Per-layer batch means and (biased) variances of one train-mode pass.
type BatchStats = (Vec<Array1<f64>>, Vec<Array1<f64>>);

struct HiddenCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre_act: Array2<f64>,
    mask: Array2<f64>,
}

struct TrainPass {
    caches: Vec<HiddenCache>,
    last_input: Array2<f64>,
    logits: Vec<f64>,
    batch_means: Vec<Array1<f64>>,
    batch_vars: Vec<Array1<f64>>,
}

impl ProbeModel {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(IcrError::DimensionMismatch { expected: self.input_dim(), got: width });
        }
        Ok(())
    }

    fn leaky(&self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            self.config.leaky_slope * x
        }
    }

    fn affine(lin: &Linear, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&lin.weight.t()) + &lin.bias
    }

    /// Eval-mode logits. Pure: reads running statistics, never writes them.
    pub fn logits_eval(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_width(batch.ncols())?;
        let eps = self.config.bn_eps;
        let mut h = batch.to_owned();
        for (lin, bn) in self.linears.iter().zip(&self.norms) {
            let mut z = Self::affine(lin, &h);
            for mut row in z.rows_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    let xhat = (*v - bn.running_mean[k]) / (bn.running_var[k] + eps).sqrt();
                    *v = self.leaky(bn.gamma[k] * xhat + bn.beta[k]);
                }
            }
            h = z;
        }
        let out = Self::affine(self.linears.last().expect("output layer"), &h);
        Ok(out.column(0).to_vec())
    }

    fn train_pass(&self, batch: ArrayView2<'_, f64>, dropout_seed: u64) -> Result<TrainPass> {
        self.check_width(batch.ncols())?;
        let b = batch.nrows();
        if b < 2 {
            return Err(IcrError::BatchTooSmall(b));
        }
        let eps = self.config.bn_eps;
        let masks = dropout_masks(&self.config, b, dropout_seed);
        let mut h = batch.to_owned();
        let mut caches = Vec::with_capacity(self.norms.len());
        let mut batch_means = Vec::new();
        let mut batch_vars = Vec::new();
        for ((lin, bn), mask) in self.linears.iter().zip(&self.norms).zip(masks) {
            let z = Self::affine(lin, &h);
            let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = &z - &mean;
            let var = (&centered * &centered).mean_axis(Axis(0)).expect("nonempty batch");
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = &centered * &inv_std;
            let pre_act = &xhat * &bn.gamma + &bn.beta;
            let act = pre_act.mapv(|v| self.leaky(v));
            let out = &act * &mask;
            caches.push(HiddenCache { input: h, xhat, inv_std, pre_act, mask });
            batch_means.push(mean);
            batch_vars.push(var);
            h = out;
        }
        let z = Self::affine(self.linears.last().expect("output layer"), &h);
        Ok(TrainPass { caches, last_input: h, logits: z.column(0).to_vec(), batch_means, batch_vars })
    }

    /// Probabilities for every row of `batch`.
    ///
    /// Train mode normalizes with batch statistics and applies dropout drawn
    /// from `dropout_seed`; eval mode uses running statistics and no dropout.
    /// Neither mode mutates the model.
    pub fn forward(&self, batch: ArrayView2<'_, f64>, mode: Mode, dropout_seed: u64) -> Result<Vec<f64>> {
        let logits = match mode {
            Mode::Eval => self.logits_eval(batch)?,
            Mode::Train => self.train_pass(batch, dropout_seed)?.logits,
        };
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Unclamped train-mode logits (batch statistics, dropout from `dropout_seed`).
    pub fn train_logits(&self, batch: ArrayView2<'_, f64>, dropout_seed: u64) -> Result<Vec<f64>> {
        Ok(self.train_pass(batch, dropout_seed)?.logits)
    }

    /// Hallucination probability of one feature vector (eval mode).
    pub fn predict(&self, feature: &[f64]) -> Result<f64> {
        self.check_width(feature.len())?;
        let row = ArrayView2::from_shape((1, feature.len()), feature).expect("row shape");
        Ok(sigmoid(self.logits_eval(row)?[0]))
    }

    /// Eval-mode logit of one feature vector. Monotone in [`Self::predict`]
    /// but never saturates, so it ranks confident examples without ties.
    pub fn predict_logit(&self, feature: &[f64]) -> Result<f64> {
        self.check_width(feature.len())?;
        let row = ArrayView2::from_shape((1, feature.len()), feature).expect("row shape");
        Ok(self.logits_eval(row)?[0])
    }

    /// Mean BCE of a train-mode pass and its exact gradient with respect to
    /// every trainable parameter (batchnorm batch statistics included).
    pub fn loss_and_grad(
        &self,
        batch: ArrayView2<'_, f64>,
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<(f64, ProbeGrads)> {
        let (loss, grads, _) = self.loss_grad_stats(batch, labels, dropout_seed)?;
        Ok((loss, grads))
    }

    fn loss_grad_stats(
        &self,
        batch: ArrayView2<'_, f64>,
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<(f64, ProbeGrads, BatchStats)> {
        if labels.len() != batch.nrows() {
            return Err(IcrError::DimensionMismatch { expected: batch.nrows(), got: labels.len() });
        }
        let pass = self.train_pass(batch, dropout_seed)?;
        let b = batch.nrows() as f64;
        let loss = bce_from_logits(&pass.logits, labels);

        let dz_out: Array2<f64> =
            Array2::from_shape_fn((labels.len(), 1), |(i, _)| (sigmoid_raw(pass.logits[i]) - labels[i] as f64) / b);
        let n_lin = self.linears.len();
        let mut lin_grads: Vec<Option<Linear>> = vec![None; n_lin];
        let mut norm_grads: Vec<Option<(Array1<f64>, Array1<f64>)>> = vec![None; self.norms.len()];

        let out_lin = &self.linears[n_lin - 1];
        lin_grads[n_lin - 1] =
            Some(Linear { weight: dz_out.t().dot(&pass.last_input), bias: dz_out.sum_axis(Axis(0)) });
        let mut dh = dz_out.dot(&out_lin.weight);

        for k in (0..self.norms.len()).rev() {
            let c = &pass.caches[k];
            let bn = &self.norms[k];
            let slope = self.config.leaky_slope;
            let mut dy = &dh * &c.mask;
            dy.zip_mut_with(&c.pre_act, |g, &y| {
                if y <= 0.0 {
                    *g *= slope;
                }
            });
            let dgamma = (&dy * &c.xhat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            // dz = inv_std / B * (B * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let dz = (&dxhat * b - &sum_dxhat - &(&c.xhat * &sum_dxhat_xhat)) * &(&c.inv_std / b);
            lin_grads[k] = Some(Linear { weight: dz.t().dot(&c.input), bias: dz.sum_axis(Axis(0)) });
            norm_grads[k] = Some((dgamma, dbeta));
            dh = dz.dot(&self.linears[k].weight);
        }

        let grads = ProbeGrads {
            linears: lin_grads.into_iter().map(|g| g.expect("filled")).collect(),
            norms: norm_grads.into_iter().map(|g| g.expect("filled")).collect(),
        };
        Ok((loss, grads, (pass.batch_means, pass.batch_vars)))
    }

    /// Trainable parameters flattened in checkpoint order: for each linear
    /// layer its weight (row-major) then bias, then for each batchnorm its
    /// scale then shift.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lin in &self.linears {
            out.extend(lin.weight.iter());
            out.extend(lin.bias.iter());
        }
        for bn in &self.norms {
            out.extend(bn.gamma.iter());
            out.extend(bn.beta.iter());
        }
        out
    }

    /// Inverse of [`Self::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if values.len() != expected {
            return Err(IcrError::DimensionMismatch { expected, got: values.len() });
        }
        let mut it = values.iter().copied();
        for lin in &mut self.linears {
            lin.weight.iter_mut().for_each(|v| *v = it.next().expect("sized"));
            lin.bias.iter_mut().for_each(|v| *v = it.next().expect("sized"));
        }
        for bn in &mut self.norms {
            bn.gamma.iter_mut().for_each(|v| *v = it.next().expect("sized"));
            bn.beta.iter_mut().for_each(|v| *v = it.next().expect("sized"));
        }
        Ok(())
    }

    fn update_running_stats(&mut self, means: &[Array1<f64>], vars: &[Array1<f64>], batch: usize) {
        let m = self.config.bn_momentum;
        let unbias = batch as f64 / (batch as f64 - 1.0);
        for ((bn, mean), var) in self.norms.iter_mut().zip(means).zip(vars) {
            bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
            bn.running_var = &bn.running_var * (1.0 - m) + &(var * (unbias * m));
        }
    }

    /// Switches to eval mode and rounds every stored value to `f32`.
    pub fn freeze(&mut self) {
        let round = |a: &mut Array1<f64>| a.mapv_inplace(|v| v as f32 as f64);
        for lin in &mut self.linears {
            lin.weight.mapv_inplace(|v| v as f32 as f64);
            round(&mut lin.bias);
        }
        for bn in &mut self.norms {
            round(&mut bn.gamma);
            round(&mut bn.beta);
            round(&mut bn.running_mean);
            round(&mut bn.running_var);
        }
        self.training = false;
    }
}

fn sigmoid_raw(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProbeGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lin in &self.linears {
            out.extend(lin.weight.iter());
            out.extend(lin.bias.iter());
        }
        for (g, b) in &self.norms {
            out.extend(g.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Number of weight and bias elements, optionally plus the batchnorm
/// scale/shift pairs.
pub fn param_count(model: &ProbeModel, include_batchnorm: bool) -> usize {
    let linear: usize = model.linears.iter().map(|l| l.weight.len() + l.bias.len()).sum();
    let bn: usize = model.norms.iter().map(|n| n.gamma.len() + n.beta.len()).sum();
    linear + if include_batchnorm { bn } else { 0 }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &ProbeConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Reduce-on-plateau in "min" mode: after more than `patience` epochs
/// without an improvement larger than `threshold`, multiply the rate by
/// `factor`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
    factor: f64,
    patience: usize,
    threshold: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self { lr, best: f64::INFINITY, bad_epochs: 0, factor, patience, threshold }
    }

    /// Feeds one epoch's validation loss; returns true if the rate dropped.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Stratified hold-out: `fraction` of each class (rounded, at least one row
/// overall) goes to validation. Returns `(train, validation)` row indices.
pub fn stratified_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut leftovers: Vec<Vec<usize>> = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        let take = ((idx.len() as f64) * fraction).round() as usize;
        let take = take.min(idx.len().saturating_sub(1));
        held.extend_from_slice(&idx[..take]);
        leftovers.push(idx[take..].to_vec());
    }
    if held.is_empty() {
        // Move one row from the larger class.
        let big = if leftovers[0].len() >= leftovers[1].len() { 0 } else { 1 };
        if let Some(i) = leftovers[big].pop() {
            held.push(i);
        }
    }
    for l in leftovers {
        train.extend(l);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

pub(crate) fn check_training_data(features: ArrayView2<'_, f64>, labels: &[u8], min_rows: usize) -> Result<()> {
    if features.nrows() != labels.len() {
        return Err(IcrError::DimensionMismatch { expected: features.nrows(), got: labels.len() });
    }
    if features.nrows() < min_rows {
        return Err(IcrError::Config(format!("need at least {min_rows} training rows, got {}", features.nrows())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(IcrError::Config(format!("labels must be 0 or 1, got {bad}")));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(IcrError::SingleClass);
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        return Err(IcrError::NonFinite { index: pos });
    }
    Ok(())
}

fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Trains a probe from scratch. Fully determined by `(features, labels,
/// config)`; the returned model is frozen (eval mode, `f32`-rounded).
pub fn train_probe(
    features: ArrayView2<'_, f64>,
    labels: &[u8],
    config: &ProbeConfig,
) -> Result<(ProbeModel, TrainHistory)> {
    check_training_data(features, labels, 10)?;
    let config = config.with_input_dim(features.ncols());
    let mut model = init_probe(&config)?;

    let (train_idx, val_idx) = stratified_split(labels, config.val_fraction, derive_seed(config.seed, 1));
    let x_val = select_rows(features, &val_idx);
    let y_val: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len());
    let mut sched = PlateauScheduler::new(
        config.learning_rate,
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_threshold,
    );
    let mut shuffle_rng = rng(derive_seed(config.seed, 2));
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;

    for _epoch in 0..config.epochs {
        let lr = sched.lr;
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // A one-row batch has no batch variance.
            if chunk.len() < 2 {
                continue;
            }
            let xb = select_rows(features, chunk);
            let yb: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let dropout_seed = derive_seed(config.seed, 1_000_000 + step);
            step += 1;
            let (loss, grads, (means, vars)) = model.loss_grad_stats(xb.view(), &yb, dropout_seed)?;
            model.update_running_stats(&means, &vars, chunk.len());
            adam.step(&mut params, &grads.flat(), lr, &config);
            model.set_flat_params(&params)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        let val_loss = bce_from_logits(&model.logits_eval(x_val.view())?, &y_val);
        history.epochs.push(EpochStats { train_loss, val_loss, learning_rate: lr });
        sched.observe(val_loss);
    }
    model.freeze();
    Ok((model, history))
}

/// Eval-mode logits for every row; rows are scored independently.
pub fn score_rows(model: &ProbeModel, features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    model.logits_eval(features)
}

/// Eval-mode probabilities for every row.
pub fn predict_rows(model: &ProbeModel, features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    Ok(model.logits_eval(features)?.into_iter().map(sigmoid).collect())
}

pub(crate) fn column_subset(features: ArrayView2<'_, f64>, keep: &[usize]) -> Array2<f64> {
    features.select(Axis(1), keep)
}
