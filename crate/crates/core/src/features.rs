// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain CSV files for pooled features (`layer_1,...,layer_L`, one row per
//! example) and labels (`label`, one row per example).

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{IcrError, Result};
use crate::score::{layer_header, push_row};

pub fn features_to_csv(features: ArrayView2<'_, f64>) -> String {
    let mut out = layer_header(features.ncols());
    for row in features.rows() {
        push_row(&mut out, row.iter());
    }
    out
}

pub fn labels_to_csv(labels: &[u8]) -> String {
    let mut out = String::from("label\n");
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_features_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| IcrError::Csv("empty feature file".into()))?;
    let cols = header.split(',').count();
    let mut values = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(IcrError::Csv(format!("row {} has {} cells, header has {cols}", n + 1, cells.len())));
        }
        for c in cells {
            let v: f64 = c.trim().parse().map_err(|_| IcrError::Csv(format!("row {}: cannot parse {c:?}", n + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("sized"))
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<u8>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    lines.next().ok_or_else(|| IcrError::Csv("empty label file".into()))?;
    lines
        .enumerate()
        .map(|(n, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(IcrError::Csv(format!("row {}: label must be 0 or 1, got {other:?}", n + 1))),
        })
        .collect()
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    parse_features_csv(&fs::read_to_string(path).map_err(|e| IcrError::io(path, e))?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_labels_csv(&fs::read_to_string(path).map_err(|e| IcrError::io(path, e))?)
}

pub fn write_features(path: impl AsRef<Path>, features: ArrayView2<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features_to_csv(features)).map_err(|e| IcrError::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_csv(labels)).map_err(|e| IcrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn features_round_trip_exactly() {
        let x = array![[0.1, 1.0 / 3.0], [0.0, 0.123_456_789_012_345_68]];
        let text = features_to_csv(x.view());
        assert!(text.starts_with("layer_1,layer_2\n"));
        assert_eq!(parse_features_csv(&text).unwrap(), x);
    }

    #[test]
    fn labels_round_trip() {
        let y = vec![0, 1, 1, 0];
        assert_eq!(parse_labels_csv(&labels_to_csv(&y)).unwrap(), y);
        assert!(parse_labels_csv("label\n2\n").is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(parse_features_csv("layer_1,layer_2\n0.1\n").is_err());
    }
}
