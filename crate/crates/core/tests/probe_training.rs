// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

use icr_core::eval::auroc;
use icr_core::probe::checkpoint::{decode_checkpoint, encode_checkpoint};
use icr_core::probe::{init_probe, param_count, predict_rows, score_rows, train_probe, ProbeConfig, ProbeModel};
use icr_core::seeds::rng;
use icr_core::synth::{gen_planted_dataset, SynthSpec};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Eval-mode logit written out loop by loop.
fn straight_line_logit(model: &ProbeModel, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let eps = model.config.bn_eps;
    let slope = model.config.leaky_slope;
    for (k, lin) in model.linears.iter().enumerate() {
        let mut z = vec![0.0; lin.weight.nrows()];
        for o in 0..z.len() {
            let mut acc = lin.bias[o];
            for i in 0..h.len() {
                acc += lin.weight[[o, i]] * h[i];
            }
            z[o] = acc;
        }
        if let Some(bn) = model.norms.get(k) {
            for o in 0..z.len() {
                let y = bn.gamma[o] * (z[o] - bn.running_mean[o]) / (bn.running_var[o] + eps).sqrt() + bn.beta[o];
                z[o] = if y > 0.0 { y } else { slope * y };
            }
        }
        h = z;
    }
    h[0]
}

#[test]
fn eval_forward_matches_straight_line() {
    for seed in 0..6u64 {
        let mut r = rng(seed);
        let dim = r.gen_range(1..=12);
        let mut m = init_probe(&ProbeConfig::new(dim, seed)).unwrap();
        for bn in &mut m.norms {
            bn.gamma.mapv_inplace(|_| 1.0 + 0.2 * r.sample::<f64, _>(StandardNormal));
            bn.beta.mapv_inplace(|_| 0.1 * r.sample::<f64, _>(StandardNormal));
            bn.running_mean.mapv_inplace(|_| 0.3 * r.sample::<f64, _>(StandardNormal));
            bn.running_var.mapv_inplace(|_| r.gen_range(0.2..2.0));
        }
        let x = Array2::from_shape_fn((7, dim), |_| r.gen_range(-1.0..1.0));
        let logits = score_rows(&m, x.view()).unwrap();
        for (row, got) in x.outer_iter().zip(&logits) {
            let want = straight_line_logit(&m, &row.to_vec());
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn separable_planted_features_train_to_low_validation_loss() {
    let mut spec = SynthSpec::new(3, 12);
    spec.sigma = 0.02;
    let (x, y) = gen_planted_dataset(&spec, 400).unwrap();
    let (model, history) = train_probe(x.view(), &y, &ProbeConfig::new(12, 3)).unwrap();
    let last = history.epochs.last().unwrap();
    assert!(last.val_loss < 0.2, "final validation loss {}", last.val_loss);

    let p = predict_rows(&model, x.view()).unwrap();
    let mean = |c: u8| {
        let v: Vec<f64> = p.iter().zip(&y).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(1) > mean(0));
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn constant_features_give_chance_auroc() {
    let x = Array2::zeros((200, 8));
    let y: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let (model, _) = train_probe(x.view(), &y, &ProbeConfig::new(8, 1)).unwrap();
    let a = auroc(&score_rows(&model, x.view()).unwrap(), &y).unwrap();
    assert!((a - 0.5).abs() <= 0.02, "{a}");
}

#[test]
fn training_is_deterministic_and_checkpoints_reload_exactly() {
    let (x, y) = gen_planted_dataset(&SynthSpec::new(8, 10), 120).unwrap();
    let cfg = ProbeConfig::new(10, 21);
    let (a, ha) = train_probe(x.view(), &y, &cfg).unwrap();
    let (b, hb) = train_probe(x.view(), &y, &cfg).unwrap();
    assert_eq!(ha, hb);
    let bytes = encode_checkpoint(&a).unwrap();
    assert_eq!(bytes, encode_checkpoint(&b).unwrap());

    let back = decode_checkpoint(&bytes).unwrap();
    let s1 = score_rows(&a, x.view()).unwrap();
    let s2 = score_rows(&back, x.view()).unwrap();
    assert!(s1.iter().zip(&s2).all(|(p, q)| p.to_bits() == q.to_bits()));

    let (c, _) = train_probe(x.view(), &y, &cfg.with_seed(22)).unwrap();
    assert_ne!(encode_checkpoint(&c).unwrap(), bytes);
}

#[test]
fn parameter_budget_at_41_layers() {
    let m = init_probe(&ProbeConfig::new(41, 0)).unwrap();
    let linear = param_count(&m, false);
    assert_eq!(linear, 41 * 128 + 128 + 128 * 64 + 64 + 64 * 32 + 32 + 32 + 1);
    assert!(linear < 16_384);
    assert_eq!(param_count(&m, true) - linear, 2 * (128 + 64 + 32));
}

#[test]
fn bn_init_is_unit_scale_zero_shift() {
    let m = init_probe(&ProbeConfig::new(5, 9)).unwrap();
    for bn in &m.norms {
        assert!(bn.gamma.iter().all(|&g| g == 1.0));
        assert!(bn.beta.iter().all(|&b| b == 0.0));
    }
}
