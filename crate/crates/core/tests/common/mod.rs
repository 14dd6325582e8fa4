// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use icr_core::dumpio::ActivationRecord;
use icr_core::probe::{init_probe, ProbeConfig};
use icr_core::seeds::rng;
use icr_core::synth::{gen_synthetic_record, SynthSpec};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Worst-case gradient disagreement of one random probe instance.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub params: usize,
    /// Components whose plain central difference missed and were re-estimated
    /// by Richardson extrapolation.
    pub refined: usize,
}

/// Floor on the relative-error denominator, so exact zeros (dropped units)
/// and round-off-sized entries compare on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Test-side copy of the probe as plain row-major vectors, with a
/// straight-line train-mode forward that shares no code with the crate.
struct PlainProbe {
    /// Per linear layer: weight `(out, in)` row-major, then bias.
    linears: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    gammas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    eps: f64,
    slope: f64,
}

impl PlainProbe {
    fn affine(&self, k: usize, h: &[f64], batch: usize) -> Vec<f64> {
        let (w, b, out, inp) = &self.linears[k];
        let mut z = vec![0.0; batch * out];
        for r in 0..batch {
            let x = &h[r * inp..(r + 1) * inp];
            for o in 0..*out {
                let row = &w[o * inp..(o + 1) * inp];
                z[r * out + o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        z
    }

    /// Input of every linear layer, from layer `from` on, given its input.
    fn inputs_from(&self, from: usize, input: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut h = input.to_vec();
        let mut out = vec![h.clone()];
        for k in from..self.gammas.len() {
            let z = self.affine(k, &h, batch);
            let width = self.linears[k].2;
            let mut next = vec![0.0; batch * width];
            for c in 0..width {
                let mean = (0..batch).map(|r| z[r * width + c]).sum::<f64>() / batch as f64;
                let var = (0..batch).map(|r| (z[r * width + c] - mean).powi(2)).sum::<f64>() / batch as f64;
                for r in 0..batch {
                    let y = self.gammas[k][c] * (z[r * width + c] - mean) / (var + self.eps).sqrt() + self.betas[k][c];
                    let a = if y > 0.0 { y } else { self.slope * y };
                    next[r * width + c] = a * self.masks[k][r * width + c];
                }
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    fn loss_from(&self, from: usize, input: &[f64], labels: &[u8]) -> f64 {
        let batch = labels.len();
        let h = self.inputs_from(from, input, batch).pop().unwrap();
        let logits = self.affine(self.linears.len() - 1, &h, batch);
        // Stable BCE with logits, written out independently.
        logits.iter().zip(labels).map(|(&z, &y)| z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p()).sum::<f64>()
            / batch as f64
    }

    /// Flat-index `k` in checkpoint order, resolved to (layer, slot).
    fn param_mut(&mut self, mut k: usize) -> (&mut f64, usize) {
        for (i, (w, b, _, _)) in self.linears.iter_mut().enumerate() {
            if k < w.len() {
                return (&mut w[k], i);
            }
            k -= w.len();
            if k < b.len() {
                return (&mut b[k], i);
            }
            k -= b.len();
        }
        for (i, (g, be)) in self.gammas.iter_mut().zip(self.betas.iter_mut()).enumerate() {
            if k < g.len() {
                return (&mut g[k], i);
            }
            k -= g.len();
            if k < be.len() {
                return (&mut be[k], i);
            }
            k -= be.len();
        }
        panic!("parameter index out of range");
    }
}

/// Inverted-dropout masks drawn in the documented order: one uniform per
/// unit, layer by layer, row-major, from the seeded stream.
fn plain_masks(widths: &[usize], batch: usize, p: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    widths
        .iter()
        .map(|&w| (0..batch * w).map(|_| if r.gen::<f64>() >= p { 1.0 / (1.0 - p) } else { 0.0 }).collect())
        .collect()
}

/// Central finite differences of the mean BCE over every trainable
/// parameter, against the analytic backward pass. Batchnorm runs on batch
/// statistics and the dropout mask is fixed by `dropout_seed`.
pub fn gradient_check(seed: u64, input_dim: usize, batch: usize) -> GradCheck {
    let mut r = rng(seed);
    let cfg = ProbeConfig::new(input_dim, seed);
    let mut model = init_probe(&cfg).unwrap();
    // Move batchnorm off its identity init so scale/shift gradients are exercised.
    let mut p = model.flat_params();
    let n_lin: usize = model.linears.iter().map(|l| l.weight.len() + l.bias.len()).sum();
    for v in &mut p[n_lin..] {
        *v += 0.1 * r.sample::<f64, _>(StandardNormal);
    }
    model.set_flat_params(&p).unwrap();

    let x = Array2::from_shape_fn((batch, input_dim), |_| r.gen::<f64>());
    let mut y: Vec<u8> = (0..batch).map(|i| (i % 2) as u8).collect();
    y.rotate_left(r.gen_range(0..batch));
    let dropout_seed = r.gen::<u64>();

    let (loss, grads) = model.loss_and_grad(x.view(), &y, dropout_seed).unwrap();
    let analytic = grads.flat();
    assert_eq!(analytic.len(), p.len());

    let mut plain = PlainProbe {
        linears: model
            .linears
            .iter()
            .map(|l| (l.weight.iter().copied().collect(), l.bias.to_vec(), l.weight.nrows(), l.weight.ncols()))
            .collect(),
        gammas: model.norms.iter().map(|n| n.gamma.to_vec()).collect(),
        betas: model.norms.iter().map(|n| n.beta.to_vec()).collect(),
        masks: plain_masks(&cfg.hidden_widths, batch, cfg.dropout, dropout_seed),
        eps: cfg.bn_eps,
        slope: cfg.leaky_slope,
    };
    let x_flat: Vec<f64> = x.iter().copied().collect();
    let cached = plain.inputs_from(0, &x_flat, batch);
    let base = plain.loss_from(0, &x_flat, &y);
    assert!((base - loss).abs() <= 1e-12 * loss.abs().max(1.0), "independent forward disagrees: {base} vs {loss}");

    let h = 1e-5;
    let mut worst = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, params: p.len(), refined: 0 };
    for (k, &a) in analytic.iter().enumerate() {
        let (_, layer) = plain.param_mut(k);
        let mut central = |step: f64| {
            let (slot, _) = plain.param_mut(k);
            let orig = *slot;
            *slot = orig + step;
            let up = plain.loss_from(layer, &cached[layer], &y);
            let (slot, _) = plain.param_mut(k);
            *slot = orig - step;
            let down = plain.loss_from(layer, &cached[layer], &y);
            let (slot, _) = plain.param_mut(k);
            *slot = orig;
            (up - down) / (2.0 * step)
        };
        let rel_err = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        let mut numeric = central(h);
        if rel_err(numeric) > 1e-4 {
            // Strongly curved direction (typically a two-row batch whose
            // variance is near the batchnorm epsilon): cancel the h^2 term.
            numeric = (4.0 * central(h / 2.0) - numeric) / 3.0;
            worst.refined += 1;
        }
        worst.max_abs_err = worst.max_abs_err.max((a - numeric).abs());
        worst.max_rel_err = worst.max_rel_err.max(rel_err(numeric));
    }
    worst
}

/// Random synthetic record within the given size limits.
pub fn random_record(seed: u64, max_tokens: usize, max_layers: usize, max_dim: usize) -> ActivationRecord {
    let mut r = rng(seed);
    let layers = r.gen_range(1..=max_layers);
    let mut spec = SynthSpec::new(seed, layers);
    spec.n_tokens = r.gen_range(2..=max_tokens);
    spec.hidden_dim = r.gen_range(spec.n_tokens.min(max_dim).max(2)..=max_dim);
    spec.answer_len = r.gen_range(1..=spec.n_tokens);
    spec.ffn_permuted_fraction = r.gen::<f64>();
    spec.update_scale = r.gen_range(0.5..10.0);
    spec.n_heads = r.gen_range(0..3);
    gen_synthetic_record(&spec, r.gen_range(0..=1)).unwrap()
}

/// Per-element maximum absolute difference.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
