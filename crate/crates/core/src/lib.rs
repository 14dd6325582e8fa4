// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream hallucination detection.
//!
//! * [`dumpio`]: the ICRD activation-dump container.
//! * [`score`]: ICR score matrices and pooled per-layer features.
//! * [`probe`]: the MLP probe (hand-written forward/backward, Adam, plateau schedule).
//! * [`eval`]: AUROC, layer-wise curves, ablations, generalization grids, baselines.
//! * [`synth`]: synthetic records, planted datasets and brute-force oracles.
//! * [`report`]: JSON/CSV report tables.

pub mod dumpio;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod probe;
pub mod report;
pub mod score;
pub mod seeds;
pub mod synth;

pub use error::{IcrError, Result};
pub use exec::Exec;
