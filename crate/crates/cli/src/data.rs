//! CSV ingestion and export.
//!
//! Every column except the label column must be numeric. Labels are mapped to
//! dense ids in order of first appearance; features are standardized with the
//! statistics of the training split only.

use std::collections::HashMap;
use std::path::Path;

use fire_core::batchfire::fmt_real;
use fire_core::model::{Example, Fragment, Provenance};

use crate::error::{CliError, Result};

/// Parsed CSV before label encoding.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

pub fn read_raw_csv(path: &Path, label_column: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| CliError::Data(format!("{}: no label column `{label_column}`", path.display())))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|&(i, _)| i != label_idx).map(|(_, h)| h.to_string()).collect();
    if feature_names.is_empty() {
        return Err(CliError::Data(format!("{}: no feature columns", path.display())));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let mut x = Vec::with_capacity(feature_names.len());
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                if cell.is_empty() {
                    return Err(CliError::Data(format!("{}:{line}: missing label", path.display())));
                }
                labels.push(cell.to_string());
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    CliError::Data(format!("{}:{line}: non-numeric value `{cell}` in column `{}`", path.display(), &headers[i]))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Data(format!("{}:{line}: non-finite value", path.display())));
                }
                x.push(v);
            }
        }
        features.push(x);
    }
    if features.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", path.display())));
    }
    Ok(RawTable { feature_names, features, labels })
}

/// Per-column mean and standard deviation; constant columns keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Assigns dense ids to labels in order of first appearance, sharing one table across calls.
#[derive(Debug, Default)]
pub struct LabelEncoder {
    ids: HashMap<String, usize>,
}

impl LabelEncoder {
    pub fn encode(&mut self, label: &str) -> usize {
        let next = self.ids.len();
        *self.ids.entry(label.to_string()).or_insert(next)
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }
}

fn to_fragment(id: &str, table: &RawTable, std: &Standardizer, enc: &mut LabelEncoder, prov: Provenance) -> Result<Fragment> {
    let examples = table.features.iter().zip(&table.labels).map(|(x, l)| Example::new(std.apply(x), enc.encode(l))).collect();
    Ok(Fragment::new(id, examples, prov)?)
}

/// Loads one CSV as a training split, standardized with its own statistics.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Fragment> {
    let table = read_raw_csv(path, label_column)?;
    let std = Standardizer::fit(&table.features);
    to_fragment("train", &table, &std, &mut LabelEncoder::default(), Provenance::Batch(0))
}

/// Training and validation files; validation is standardized with training statistics.
pub fn load_csv_pair(train: &Path, val: &Path, label_column: &str) -> Result<(Fragment, Fragment, usize)> {
    let tr = read_raw_csv(train, label_column)?;
    let va = read_raw_csv(val, label_column)?;
    if tr.feature_names != va.feature_names {
        return Err(CliError::Data("training and validation files have different feature columns".into()));
    }
    let std = Standardizer::fit(&tr.features);
    let mut enc = LabelEncoder::default();
    let a = to_fragment("train", &tr, &std, &mut enc, Provenance::Batch(0))?;
    let b = to_fragment("val", &va, &std, &mut enc, Provenance::Validation)?;
    Ok((a, b, enc.num_classes()))
}

/// Holds out the rows at `val_rows` (indices into the file) and standardizes with the rest.
pub fn split_csv(table: &RawTable, val_rows: &[usize]) -> Result<(Fragment, Fragment, usize)> {
    let mut is_val = vec![false; table.features.len()];
    for &i in val_rows {
        is_val[i] = true;
    }
    let pick = |want: bool| RawTable {
        feature_names: table.feature_names.clone(),
        features: table.features.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(x, _)| x.clone()).collect(),
        labels: table.labels.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(l, _)| l.clone()).collect(),
    };
    let (tr, va) = (pick(false), pick(true));
    if tr.features.is_empty() || va.features.is_empty() {
        return Err(CliError::Data("split leaves an empty training or validation set".into()));
    }
    let std = Standardizer::fit(&tr.features);
    // ids follow first appearance in the file, not in either split
    let mut enc = LabelEncoder::default();
    table.labels.iter().for_each(|l| {
        enc.encode(l);
    });
    let a = to_fragment("train", &tr, &std, &mut enc, Provenance::Batch(0))?;
    let b = to_fragment("val", &va, &std, &mut enc, Provenance::Validation)?;
    Ok((a, b, enc.num_classes()))
}

/// Header `x0,..,x{d-1},label`; reals with 17 significant digits.
pub fn fragment_csv(frag: &Fragment) -> String {
    let d = frag.feature_dim();
    let mut out: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    out.push("label".into());
    let mut s = out.join(",");
    s.push('\n');
    for e in &frag.examples {
        for v in &e.x {
            s.push_str(&fmt_real(*v));
            s.push(',');
        }
        s.push_str(&e.y.to_string());
        s.push('\n');
    }
    s
}

pub fn write_fragment_csv(frag: &Fragment, path: &Path) -> Result<()> {
    std::fs::write(path, fragment_csv(frag))?;
    Ok(())
}
