// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report tables and their JSON/CSV encodings.
//!
//! JSON schema: `{run_id, config, tables: name -> {rows, cols, values}}`.
//! Tables are keyed in sorted order and floats use shortest round-trip
//! formatting, so emitting the same report twice gives identical bytes.
//! Non-finite cells are written as `null` in JSON and empty in CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    #[serde(with = "nullable_grid")]
    pub values: Vec<Vec<f64>>,
}

mod nullable_grid {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(grid: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let g: Vec<Vec<Option<f64>>> =
            grid.iter().map(|r| r.iter().map(|&v| v.is_finite().then_some(v)).collect()).collect();
        g.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let g: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(g.into_iter().map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect())
    }
}

impl Table {
    pub fn new(cols: Vec<String>) -> Self {
        Self { rows: Vec::new(), cols, values: Vec::new() }
    }

    pub fn push_row(&mut self, name: impl Into<String>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.cols.len());
        self.rows.push(name.into());
        self.values.push(values);
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.values[r][c])
    }

    /// Header `row,<cols...>` then one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, vals) in self.rows.iter().zip(&self.values) {
            out.push_str(name);
            for v in vals {
                out.push(',');
                if v.is_finite() {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub tables: BTreeMap<String, Table>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = IcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(IcrError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Parses a comma-separated format list such as `json,csv`.
pub fn parse_formats(s: &str) -> Result<Vec<Format>> {
    let mut out: Vec<Format> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let f: Format = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(IcrError::Config("no report format given".into()));
    }
    Ok(out)
}

impl Report {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self { run_id: run_id.into(), config: BTreeMap::new(), tables: BTreeMap::new() }
    }

    pub fn with_config(mut self, key: &str, value: impl Serialize) -> Self {
        self.config.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }

    pub fn add_table(&mut self, name: impl Into<String>, table: Table) {
        self.tables.insert(name.into(), table);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| IcrError::Header(e.to_string()))
    }

    /// Writes `report.json` and/or one `<table>.csv` per table into `dir`.
    /// Returns the written paths.
    pub fn emit(&self, dir: impl AsRef<Path>, formats: &[Format]) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| IcrError::io(dir, e))?;
        let mut written = Vec::new();
        for f in formats {
            match f {
                Format::Json => {
                    let p = dir.join("report.json");
                    fs::write(&p, self.to_json()).map_err(|e| IcrError::io(&p, e))?;
                    written.push(p);
                }
                Format::Csv => {
                    for (name, table) in &self.tables {
                        let p = dir.join(format!("{name}.csv"));
                        fs::write(&p, table.to_csv()).map_err(|e| IcrError::io(&p, e))?;
                        written.push(p);
                    }
                }
            }
        }
        Ok(written)
    }
}

/// Plot-ready histogram: one row per bin with columns `bin_lo, bin_hi`
/// followed by one count column per group. Values outside `[lo, hi]` are
/// clamped into the edge bins.
pub fn histogram(groups: &[(&str, &[f64])], bins: usize, lo: f64, hi: f64) -> Table {
    let mut cols = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    cols.extend(groups.iter().map(|(n, _)| n.to_string()));
    let mut t = Table::new(cols);
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<usize>> = groups
        .iter()
        .map(|(_, vals)| {
            let mut c = vec![0usize; bins];
            for &v in vals.iter().filter(|v| v.is_finite()) {
                let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        })
        .collect();
    for b in 0..bins {
        let mut row = vec![lo + width * b as f64, lo + width * (b + 1) as f64];
        row.extend(counts.iter().map(|c| c[b] as f64));
        t.push_row(format!("bin_{b}"), row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.push_row("x", vec![0.1, 1.0 / 3.0]);
        t.push_row("y", vec![f64::NAN, 2.0]);
        let mut r = Report::new("run-1").with_config("seed", 7u64);
        r.add_table("main", t);
        r
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back.run_id, r.run_id);
        assert_eq!(back.tables["main"].values[0], r.tables["main"].values[0]);
        assert!(back.tables["main"].values[1][0].is_nan());
        assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn csv_shape() {
        let csv = sample().tables["main"].to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(2).unwrap(), "y,,2");
    }

    #[test]
    fn empty_table_has_header_only() {
        let t = Table::new(vec!["auroc".into()]);
        assert_eq!(t.to_csv(), "row,auroc\n");
    }

    #[test]
    fn histogram_counts() {
        let vals = [0.05, 0.15, 0.15, 0.95, 1.0, -3.0];
        let t = histogram(&[("all", &vals)], 10, 0.0, 1.0);
        assert_eq!(t.rows.len(), 10);
        assert_eq!(t.values[0][2], 2.0);
        assert_eq!(t.values[1][2], 2.0);
        assert_eq!(t.values[9][2], 2.0);
    }

    #[test]
    fn format_list() {
        assert_eq!(parse_formats("json,csv").unwrap(), vec![Format::Json, Format::Csv]);
        assert!(parse_formats("xml").is_err());
    }
}
