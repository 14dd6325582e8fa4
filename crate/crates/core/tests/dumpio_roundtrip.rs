// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

mod common;

use common::random_record;
use icr_core::dumpio::{decode_dump, encode_dump, read_dump, validate_dump, write_dump, ActivationRecord, AttnKind};
use icr_core::score::{icr_matrix, IcrMode, IcrSetting};
use icr_core::IcrError;
use proptest::prelude::*;

fn assert_records_equal(a: &ActivationRecord, b: &ActivationRecord) {
    assert_eq!(a.example_id, b.example_id);
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.answer_span, b.answer_span);
    assert_eq!(a.label, b.label);
    assert_eq!(a.attn_kind, b.attn_kind);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.metadata, b.metadata);
    assert_eq!(a.hidden.shape(), b.hidden.shape());
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in a.attn.iter().zip(&b.attn) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(a.attn_perhead.is_some(), b.attn_perhead.is_some());
    if let (Some(p), Some(q)) = (&a.attn_perhead, &b.attn_perhead) {
        assert_eq!(p.shape(), q.shape());
        assert!(p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(a.logprob, b.logprob);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_decode_is_lossless(seed in any::<u64>()) {
        let rec = random_record(seed, 12, 6, 24);
        prop_assert!(validate_dump(&rec).is_valid());
        let back = decode_dump(&encode_dump(&rec).unwrap()).unwrap();
        assert_records_equal(&rec, &back);
    }

    #[test]
    fn tensors_are_aligned(seed in any::<u64>()) {
        let rec = random_record(seed, 10, 4, 16);
        let bytes = encode_dump(&rec).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let payload_start = (16 + hlen).div_ceil(64) * 64;
        prop_assert_eq!(bytes.len(), payload_start + header["payload_length"].as_u64().unwrap() as usize);
        for t in header["tensors"].as_array().unwrap() {
            prop_assert_eq!(t["offset"].as_u64().unwrap() % 64, 0);
            prop_assert_eq!(t["dtype"].as_str().unwrap(), "f32le");
        }
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let rec = random_record(seed, 16, 5, 32);
        let path = dir.path().join(format!("r{seed}.icrd"));
        write_dump(&rec, &path).unwrap();
        assert_records_equal(&rec, &read_dump(&path).unwrap());
    }
}

#[test]
fn truncated_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rec = random_record(3, 8, 3, 16);
    let bytes = encode_dump(&rec).unwrap();
    let path = dir.path().join("cut.icrd");
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(read_dump(&path), Err(IcrError::Truncated(_))));
    assert!(matches!(read_dump(dir.path().join("missing.icrd")), Err(IcrError::Io { .. })));
}

#[test]
fn nan_upper_triangle_never_reaches_scores() {
    for seed in 0..10 {
        let rec = random_record(seed, 14, 4, 24);
        let mut poisoned = rec.clone();
        let n = rec.n_tokens();
        for l in 0..rec.n_layers() {
            for i in 0..n {
                for j in i + 1..n {
                    poisoned.attn[[l, i, j]] = f32::NAN;
                    if let Some(ph) = poisoned.attn_perhead.as_mut() {
                        for h in 0..ph.shape()[1] {
                            ph[[l, h, i, j]] = f32::NAN;
                        }
                    }
                }
            }
        }
        assert!(validate_dump(&poisoned).is_valid());
        for mode in IcrMode::ALL {
            let s = IcrSetting::new(mode, 5).unwrap();
            let a = icr_matrix(&rec, s).unwrap();
            let b = icr_matrix(&poisoned, s).unwrap();
            assert!(a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // The writer drops the poison entirely.
        let back = decode_dump(&encode_dump(&poisoned).unwrap()).unwrap();
        assert!(back.attn.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn post_softmax_maps_score_like_their_logits() {
    let rec = random_record(21, 12, 3, 16);
    let mut probs = rec.clone();
    probs.attn_kind = AttnKind::PostSoftmax;
    let n = rec.n_tokens();
    for l in 0..rec.n_layers() {
        for i in 0..n {
            let row: Vec<f64> = (0..=i).map(|j| rec.attn[[l, i, j]] as f64).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..=i {
                probs.attn[[l, i, j]] = ((row[j] - m).exp() / z) as f32;
            }
        }
    }
    let s = IcrSetting::default();
    let a = icr_matrix(&rec, s).unwrap();
    let b = icr_matrix(&probs, s).unwrap();
    assert!(common::max_abs_diff(&a.scores, &b.scores) < 1e-6);
}
