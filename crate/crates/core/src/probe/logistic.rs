// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic-regression probe trained with plain per-example SGD
//! (`theta <- theta - lr * (y_hat - y) * f`). Kept as a comparison point for
//! the MLP probe.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::check_training_data;
use crate::error::{IcrError, Result};
use crate::seeds::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn logit(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.weights.len() {
            return Err(IcrError::DimensionMismatch { expected: self.weights.len(), got: feature.len() });
        }
        Ok(self.bias + self.weights.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>())
    }

    pub fn predict(&self, feature: &[f64]) -> Result<f64> {
        Ok(1.0 / (1.0 + (-self.logit(feature)?).exp()))
    }
}

pub fn train_logistic(features: ArrayView2<'_, f64>, labels: &[u8], config: &LogisticConfig) -> Result<LogisticProbe> {
    check_training_data(features, labels, 2)?;
    let mut probe = LogisticProbe { weights: vec![0.0; features.ncols()], bias: 0.0 };
    let mut r = rng(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for &i in &order {
            let row = features.row(i);
            let f = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
            let err = probe.predict(&f)? - labels[i] as f64;
            for (w, x) in probe.weights.iter_mut().zip(&f) {
                *w -= config.learning_rate * err * x;
            }
            probe.bias -= config.learning_rate * err;
        }
    }
    Ok(probe)
}
