// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic activation records, planted feature sets, and brute-force
//! oracles for checking the main computation paths without a real model.
//!
//! Records are generated top-down. The last layer's states are a random
//! orthonormal set; every lower layer is obtained by subtracting an update
//!
//! ```text
//! dx_i = s * [ (1 - w) * sum_j a_ij * u_j
//!            +      w  * ( rho * sum_j a_i,perm(j) * u_j + (1 - rho) * zeta * g_i ) ]
//! ```
//!
//! where `u_j` are the unit-normalized states of the upper layer, `a_i` the
//! causal softmax of the stored logits, `g_i` a standard Gaussian vector and
//! `w` the layer's injection weight, drawn around the class profile. So the
//! additive residual structure `x[l] = x[l-1] + dx` holds by construction:
//! `w = 0` is a pure attention mixture, `w = 1` a pure "FFN" injection.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationRecord, AnswerSpan, AttnKind};
use crate::error::{IcrError, Result};
use crate::score::{IcrMatrix, IcrMode, IcrSetting};
use crate::seeds::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_tokens: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub answer_len: usize,
    /// Standard deviation of the per-layer noise around the class profile.
    pub sigma: f64,
    pub profile_faithful: Vec<f64>,
    pub profile_hallucinated: Vec<f64>,
    /// Standard deviation of the attention logits.
    pub attn_logit_scale: f64,
    /// Overall magnitude `s` of each residual update.
    pub update_scale: f64,
    /// Scale `zeta` of the Gaussian part of the injection.
    pub ffn_noise_scale: f64,
    /// Fraction `rho` of the injection that re-weights context tokens with a
    /// permuted copy of the attention weights instead of Gaussian noise.
    pub ffn_permuted_fraction: f64,
    /// When positive, per-head logits with this many heads are stored too.
    pub n_heads: usize,
    pub with_logprob: bool,
    pub dataset: String,
}

/// Rise-peak-decline layer profiles: the hallucinated class sits above the
/// faithful one around the middle layers.
pub fn default_profiles(layers: usize) -> (Vec<f64>, Vec<f64>) {
    let l = layers as f64;
    let bump = |x: f64, centre: f64, width: f64| (-((x - centre) / width).powi(2)).exp();
    let faithful: Vec<f64> = (1..=layers).map(|i| 0.25 + 0.35 * bump(i as f64, 0.3 * l, 0.2 * l)).collect();
    let hallucinated =
        (1..=layers).zip(&faithful).map(|(i, f)| (f + 0.15 * bump(i as f64, 0.35 * l, 0.25 * l)).min(1.0)).collect();
    (faithful, hallucinated)
}

impl SynthSpec {
    pub fn new(seed: u64, n_layers: usize) -> Self {
        let (f, h) = default_profiles(n_layers);
        Self {
            seed,
            n_tokens: 16,
            n_layers,
            hidden_dim: 32,
            answer_len: 6,
            sigma: 0.05,
            profile_faithful: f,
            profile_hallucinated: h,
            attn_logit_scale: 2.0,
            update_scale: 2.0,
            ffn_noise_scale: 1.0,
            ffn_permuted_fraction: 0.0,
            n_heads: 0,
            with_logprob: true,
            dataset: "synth".into(),
        }
    }

    /// Fixture where attention carries signal beyond the hidden states: the
    /// hallucinated class injects mostly misattributed context (permuted
    /// attention weights), which keeps the update's spread similar but moves
    /// it away from the real attention. Large updates keep the projection
    /// distribution sharp enough for the difference to show.
    pub fn attention_signal(seed: u64, n_layers: usize) -> Self {
        Self {
            update_scale: 20.0,
            ffn_permuted_fraction: 0.9,
            dataset: "attention_signal".into(),
            ..Self::new(seed, n_layers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IcrError::Config(m));
        if self.n_tokens < 2 {
            return bad("synthetic records need at least 2 tokens".into());
        }
        if self.n_layers == 0 || self.hidden_dim == 0 {
            return bad("layers and hidden dimension must be positive".into());
        }
        if self.answer_len == 0 || self.answer_len > self.n_tokens {
            return bad(format!("answer length {} outside 1..={}", self.answer_len, self.n_tokens));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return bad("sigma must be nonnegative".into());
        }
        for (name, p) in [("faithful", &self.profile_faithful), ("hallucinated", &self.profile_hallucinated)] {
            if p.len() != self.n_layers {
                return bad(format!("{name} profile has {} entries, need {}", p.len(), self.n_layers));
            }
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("{name} profile must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.ffn_permuted_fraction) {
            return bad("permuted fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn profile(&self, label: u8) -> &[f64] {
        if label == 1 {
            &self.profile_hallucinated
        } else {
            &self.profile_faithful
        }
    }

    /// Copy of this spec with the seed of example `index`.
    pub fn for_example(&self, index: usize) -> Self {
        let mut s = self.clone();
        s.seed = derive_seed(self.seed, index as u64);
        s
    }
}

/// The `f64` trajectory a record is rounded from, plus the injection
/// weights actually used. Useful for checking the construction exactly.
#[derive(Debug, Clone)]
pub struct SynthTrajectory {
    /// `(L + 1, N, d)`.
    pub hidden: Array3<f64>,
    /// `(L, N, N)` logits, already rounded to `f32` precision.
    pub attn: Array3<f32>,
    pub attn_perhead: Option<Array4<f32>>,
    /// `(L,)` injection weight per layer.
    pub injection: Vec<f64>,
    pub logprob: Option<Vec<f32>>,
}

fn gaussian_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` vectors of length `dim`, orthonormal when `count <= dim`
/// (Gram-Schmidt on Gaussian draws), otherwise just unit-normalized.
fn orthonormal_set(r: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian_vec(r, dim);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

fn softmax_prefix(logits: &[f32], i: usize) -> Vec<f64> {
    let row: Vec<f64> = logits[..=i].iter().map(|&v| v as f64).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Generates the trajectory behind [`gen_synthetic_record`].
pub fn gen_synthetic_trajectory(spec: &SynthSpec, label: u8) -> Result<SynthTrajectory> {
    spec.validate()?;
    let (n, layers, d) = (spec.n_tokens, spec.n_layers, spec.hidden_dim);
    let mut r = rng(spec.seed);
    let profile = spec.profile(label);

    let mut hidden = Array3::<f64>::zeros((layers + 1, n, d));
    for (j, v) in orthonormal_set(&mut r, n, d).into_iter().enumerate() {
        for k in 0..d {
            hidden[[layers, j, k]] = v[k];
        }
    }

    let mut attn = Array3::<f32>::zeros((layers, n, n));
    let mut perhead = (spec.n_heads > 0).then(|| Array4::<f32>::zeros((layers, spec.n_heads, n, n)));
    let mut injection = vec![0.0; layers];

    for l in (1..=layers).rev() {
        // Logits: a shared base plus per-head jitter; the stored head-average
        // is what the mixture below uses.
        for i in 0..n {
            for j in 0..=i {
                let base = spec.attn_logit_scale * r.sample::<f64, _>(StandardNormal);
                match perhead.as_mut() {
                    None => attn[[l - 1, i, j]] = base as f32,
                    Some(ph) => {
                        let mut acc = 0.0;
                        for h in 0..spec.n_heads {
                            let v = (base + 0.5 * r.sample::<f64, _>(StandardNormal)) as f32;
                            ph[[l - 1, h, i, j]] = v;
                            acc += v as f64;
                        }
                        attn[[l - 1, i, j]] = (acc / spec.n_heads as f64) as f32;
                    }
                }
            }
        }

        let w = (profile[l - 1] + spec.sigma * r.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        injection[l - 1] = w;

        let upper = hidden.index_axis(Axis(0), l).to_owned();
        let units: Vec<Vec<f64>> = upper
            .rows()
            .into_iter()
            .map(|row| {
                let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(|x| x / nrm).collect()
            })
            .collect();

        for i in 0..n {
            let a = softmax_prefix(attn.index_axis(Axis(0), l - 1).row(i).as_slice().expect("contiguous"), i);
            // Random derangement-ish permutation of the support for the
            // misattributed part of the injection.
            let mut perm: Vec<usize> = (0..=i).collect();
            for k in (1..perm.len()).rev() {
                let m = r.gen_range(0..=k);
                perm.swap(k, m);
            }
            let g = gaussian_vec(&mut r, d);
            let rho = spec.ffn_permuted_fraction;
            for k in 0..d {
                let mut mix = 0.0;
                let mut misattributed = 0.0;
                for j in 0..=i {
                    mix += a[j] * units[j][k];
                    misattributed += a[perm[j]] * units[j][k];
                }
                let inject = rho * misattributed + (1.0 - rho) * spec.ffn_noise_scale * g[k];
                let dx = spec.update_scale * ((1.0 - w) * mix + w * inject);
                hidden[[l - 1, i, k]] = upper[[i, k]] - dx;
            }
        }
    }

    let logprob = spec.with_logprob.then(|| {
        let mean = if label == 1 { 1.2 } else { 0.8 };
        let dist = Exp::new(1.0 / mean).expect("positive rate");
        (0..n).map(|_| -(dist.sample(&mut r) as f32)).collect()
    });

    Ok(SynthTrajectory { hidden, attn, attn_perhead: perhead, injection, logprob })
}

/// One synthetic record of class `label`. Deterministic in `(spec, label)`.
pub fn gen_synthetic_record(spec: &SynthSpec, label: u8) -> Result<ActivationRecord> {
    let t = gen_synthetic_trajectory(spec, label)?;
    let n = spec.n_tokens;
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synthlab".to_string());
    metadata.insert("seed".to_string(), spec.seed.to_string());
    Ok(ActivationRecord {
        example_id: format!("{:016x}", spec.seed),
        dataset: spec.dataset.clone(),
        hidden: t.hidden.mapv(|v| v as f32),
        attn: t.attn,
        attn_perhead: t.attn_perhead,
        attn_kind: AttnKind::PreSoftmax,
        answer_span: AnswerSpan::new(n - spec.answer_len, n),
        label,
        logprob: t.logprob,
        tokens: (0..n).map(|i| format!("tok{i}")).collect(),
        metadata,
    })
}

/// `n_examples` records with alternating labels (0, 1, 0, ...), each from
/// its own derived seed. Record ids are `ex00000`, `ex00001`, ...
pub fn gen_planted_records(spec: &SynthSpec, n_examples: usize) -> Result<Vec<ActivationRecord>> {
    (0..n_examples)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rec = gen_synthetic_record(&spec.for_example(i), label)?;
            rec.example_id = format!("ex{i:05}");
            Ok(rec)
        })
        .collect()
}

/// Feature-level planted dataset: class-`c` rows are the class profile plus
/// `N(0, sigma^2)` noise, clipped to `[0, 1]`. Labels alternate so classes
/// are balanced to within one example.
pub fn gen_planted_dataset(spec: &SynthSpec, n_examples: usize) -> Result<(Array2<f64>, Vec<u8>)> {
    spec.validate()?;
    if n_examples < 20 {
        return Err(IcrError::Config(format!("planted datasets need at least 20 examples, got {n_examples}")));
    }
    let mut r = rng(spec.seed);
    let l = spec.n_layers;
    let mut x = Array2::zeros((n_examples, l));
    let mut labels = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let label = (i % 2) as u8;
        let profile = spec.profile(label);
        for k in 0..l {
            let v = if spec.sigma > 0.0 {
                profile[k] + spec.sigma * r.sample::<f64, _>(StandardNormal)
            } else {
                profile[k]
            };
            x[[i, k]] = v.clamp(0.0, 1.0);
        }
        labels.push(label);
    }
    Ok((x, labels))
}

/// Naive, loop-by-the-formula ICR matrix. Shares no helpers with
/// [`crate::score`]; it exists to check that module.
#[allow(clippy::needless_range_loop)]
pub fn oracle_icr(record: &ActivationRecord, setting: IcrSetting) -> Result<IcrMatrix> {
    let n = record.hidden.shape()[1];
    let layers = record.attn.shape()[0];
    let d = record.hidden.shape()[2];
    let mut out = Array2::<f64>::zeros((n, layers));
    if setting.mode == IcrMode::None {
        return Ok(IcrMatrix { scores: out });
    }
    let ln2 = std::f64::consts::LN_2;

    for l in 1..=layers {
        for i in 1..n {
            // attention distribution over j <= i
            let mut attn = vec![0.0f64; i + 1];
            if setting.mode == IcrMode::HsOnly {
                for v in attn.iter_mut() {
                    *v = 1.0 / (i + 1) as f64;
                }
            } else if record.attn_kind == AttnKind::PostSoftmax {
                let mut total = 0.0;
                for j in 0..=i {
                    attn[j] = record.attn[[l - 1, i, j]] as f64;
                    total += attn[j];
                }
                for v in attn.iter_mut() {
                    *v /= total;
                }
            } else {
                let mut hi = f64::MIN;
                for j in 0..=i {
                    hi = hi.max(record.attn[[l - 1, i, j]] as f64);
                }
                let mut lse = 0.0;
                for j in 0..=i {
                    lse += ((record.attn[[l - 1, i, j]] as f64) - hi).exp();
                }
                let lse = hi + lse.ln();
                for j in 0..=i {
                    attn[j] = ((record.attn[[l - 1, i, j]] as f64) - lse).exp();
                }
            }

            // projection lengths of the update onto each context state
            let mut proj = vec![0.0f64; i + 1];
            for j in 0..=i {
                let mut dot = 0.0;
                let mut sq = 0.0;
                for k in 0..d {
                    let upd = record.hidden[[l, i, k]] as f64 - record.hidden[[l - 1, i, k]] as f64;
                    let ctx = record.hidden[[l, j, k]] as f64;
                    dot += upd * ctx;
                    sq += ctx * ctx;
                }
                if sq == 0.0 {
                    return Err(IcrError::ZeroNorm { token: j });
                }
                proj[j] = dot / sq.sqrt();
            }
            let mut hi = f64::MIN;
            for j in 0..=i {
                hi = hi.max(proj[j]);
            }
            let mut lse = 0.0;
            for j in 0..=i {
                lse += (proj[j] - hi).exp();
            }
            let lse = hi + lse.ln();
            for j in 0..=i {
                proj[j] = (proj[j] - lse).exp();
            }

            // top-k by repeated argmax, lower index wins ties
            let k = setting.top_k.min(i + 1);
            let mut taken = vec![false; i + 1];
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for j in 0..=i {
                    if taken[j] {
                        continue;
                    }
                    match best {
                        None => best = Some(j),
                        Some(b) if attn[j] > attn[b] => best = Some(j),
                        _ => {}
                    }
                }
                taken[best.expect("k <= support")] = true;
            }
            let (mut sa, mut sp) = (0.0, 0.0);
            for j in 0..=i {
                if taken[j] {
                    sa += attn[j];
                    sp += proj[j];
                }
            }

            let mut div = 0.0;
            for j in 0..=i {
                if !taken[j] {
                    continue;
                }
                let p = proj[j] / sp;
                let q = attn[j] / sa;
                let m = (p + q) / 2.0;
                if p > 0.0 {
                    div += 0.5 * p * (p / m).ln() / ln2;
                }
                if q > 0.0 {
                    div += 0.5 * q * (q / m).ln() / ln2;
                }
            }
            out[[i, l - 1]] = div;
        }
    }
    Ok(IcrMatrix { scores: out })
}

/// Pairwise Mann-Whitney AUROC: `(concordant + 0.5 * tied) / (pos * neg)`.
pub fn oracle_auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(IcrError::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    let mut concordant = 0u64;
    let mut tied = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 1 {
                continue;
            }
            if scores[i] > scores[j] {
                concordant += 1;
            } else if scores[i] == scores[j] {
                tied += 1;
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(IcrError::SingleClass);
    }
    Ok((2 * concordant + tied) as f64 / (2 * pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dumpio::validate_dump;
    use crate::score::{icr_matrix, raw_projections};

    fn small_spec(seed: u64) -> SynthSpec {
        let mut s = SynthSpec::new(seed, 4);
        s.n_tokens = 6;
        s.hidden_dim = 8;
        s.answer_len = 3;
        s
    }

    #[test]
    fn pure_attention_mixture_projects_onto_attention_weights() {
        let mut spec = small_spec(3);
        spec.profile_faithful = vec![0.0; 4];
        spec.sigma = 0.0;
        spec.update_scale = 1.0;
        let t = gen_synthetic_trajectory(&spec, 0).unwrap();
        let l = spec.n_layers;
        let top = t.hidden.index_axis(Axis(0), l);
        for i in 0..spec.n_tokens {
            let delta: Vec<f64> = (0..spec.hidden_dim).map(|k| t.hidden[[l, i, k]] - t.hidden[[l - 1, i, k]]).collect();
            let p = raw_projections(&delta, top, i).unwrap();
            let a = softmax_prefix(t.attn.index_axis(Axis(0), l - 1).row(i).as_slice().unwrap(), i);
            for j in 0..=i {
                assert!((p[j] - a[j]).abs() < 1e-9, "i={i} j={j}: {} vs {}", p[j], a[j]);
            }
        }
    }

    #[test]
    fn same_seed_same_record() {
        let s = small_spec(11);
        assert_eq!(gen_synthetic_record(&s, 1).unwrap(), gen_synthetic_record(&s, 1).unwrap());
        assert_ne!(
            gen_synthetic_record(&s, 1).unwrap().hidden,
            gen_synthetic_record(&small_spec(12), 1).unwrap().hidden
        );
    }

    #[test]
    fn generated_records_validate() {
        for seed in 0..20 {
            let mut s = small_spec(seed);
            s.n_heads = (seed % 3) as usize;
            let rec = gen_synthetic_record(&s, (seed % 2) as u8).unwrap();
            let rep = validate_dump(&rec);
            assert!(rep.is_valid(), "{:?}", rep.violations);
        }
    }

    #[test]
    fn noiseless_planted_features_equal_profiles() {
        let mut s = SynthSpec::new(5, 10);
        s.sigma = 0.0;
        let (x, y) = gen_planted_dataset(&s, 20).unwrap();
        for (row, &label) in x.rows().into_iter().zip(&y) {
            let p = if label == 1 { &s.profile_hallucinated } else { &s.profile_faithful };
            assert_eq!(row.to_vec(), *p);
        }
        assert_eq!(y.iter().filter(|&&v| v == 1).count(), 10);
    }

    #[test]
    fn planted_dataset_rejects_small_n() {
        assert!(gen_planted_dataset(&SynthSpec::new(0, 4), 19).is_err());
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = small_spec(0);
        s.n_tokens = 1;
        assert!(s.validate().is_err());
        let mut s = small_spec(0);
        s.profile_hallucinated[0] = 1.5;
        assert!(s.validate().is_err());
        let mut s = small_spec(0);
        s.sigma = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn oracle_matches_main_path_on_small_record() {
        let rec = gen_synthetic_record(&small_spec(9), 1).unwrap();
        for mode in IcrMode::ALL {
            let setting = IcrSetting { mode, top_k: 3 };
            let a = icr_matrix(&rec, setting).unwrap();
            let b = oracle_icr(&rec, setting).unwrap();
            for (x, y) in a.scores.iter().zip(b.scores.iter()) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn oracle_auroc_extremes() {
        assert_eq!(oracle_auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(oracle_auroc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert!(matches!(oracle_auroc(&[0.1, 0.2], &[1, 1]), Err(IcrError::SingleClass)));
    }
}
