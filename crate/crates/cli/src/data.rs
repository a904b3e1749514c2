// SPDX-License-Identifier: MIT
//! Dataset layout and CSV handling.
//!
//! A dataset directory contains `model.json`, `targets.json`, `manifest.json`
//! and one `env_<e>.csv` per environment with header `x0..x{p-1}`. A single
//! CSV whose first column is an integer `env` label is accepted as an
//! alternative input format. Floats are written in their shortest
//! round-trip decimal form, so reading a written file reproduces the exact
//! values.

use crate::CliError;
use gnies::scm::InterventionKind;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Ground-truth record written next to generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub p: usize,
    pub n_envs: usize,
    pub ns: Vec<usize>,
    pub seed: u64,
    pub data_seed: u64,
    pub intervention_kind: InterventionKind,
    /// Per-environment intervened target; `null` for observational.
    pub env_targets: Vec<Option<usize>>,
    /// Union of intervened targets.
    pub targets: Vec<usize>,
    /// Topological order used to orient the random graph.
    pub topological_order: Vec<usize>,
}

/// Per-environment data matrices plus the manifest when one is present.
pub struct Dataset {
    pub envs: Vec<DMatrix<f64>>,
    pub manifest: Option<Manifest>,
}

/// Writes `content` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .ok_or_else(|| CliError::Data(format!("no parent directory for {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| CliError::Data(format!("parsing {}: {e}", path.display())))
}

/// Writes an `n x p` matrix with header `x0..x{p-1}`.
pub fn write_csv(path: &Path, x: &DMatrix<f64>) -> Result<(), CliError> {
    let p = x.ncols();
    let mut out = String::new();
    let header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..x.nrows() {
        for j in 0..p {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", x[(r, j)]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a CSV written by [`write_csv`] (any `x*` header is accepted).
pub fn read_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let p = reader.headers()?.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record?;
        if record.len() != p {
            return Err(CliError::Data(format!(
                "{}: row {} has {} fields, expected {p}",
                path.display(),
                n + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            rows.push(field.trim().parse::<f64>().map_err(|e| {
                CliError::Data(format!("{}: bad float {field:?}: {e}", path.display()))
            })?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(DMatrix::from_row_slice(n, p, &rows))
}

/// Reads a single CSV whose first column is an integer `env` label; returns
/// one matrix per environment, ordered by label.
pub fn read_env_column_csv(path: &Path) -> Result<Vec<DMatrix<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("env") {
        return Err(CliError::Data(format!(
            "{}: expected first column `env`",
            path.display()
        )));
    }
    let p = headers.len() - 1;
    let mut by_env: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != p + 1 {
            return Err(CliError::Data(format!(
                "{}: row has {} fields, expected {}",
                path.display(),
                record.len(),
                p + 1
            )));
        }
        let env: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| CliError::Data(format!("{}: bad env label: {e}", path.display())))?;
        let row = by_env.entry(env).or_default();
        for field in record.iter().skip(1) {
            row.push(field.trim().parse::<f64>().map_err(|e| {
                CliError::Data(format!("{}: bad float {field:?}: {e}", path.display()))
            })?);
        }
    }
    if by_env.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    by_env
        .into_values()
        .map(|vals| {
            let n = vals.len() / p;
            Ok(DMatrix::from_row_slice(n, p, &vals))
        })
        .collect()
}

/// Loads a dataset directory (`env_*.csv` + optional manifest) or a single
/// env-column CSV file.
pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if path.is_dir() {
        let manifest: Option<Manifest> = {
            let mf = path.join("manifest.json");
            if mf.exists() {
                Some(read_json(&mf)?)
            } else {
                None
            }
        };
        let mut envs = Vec::new();
        loop {
            let f = path.join(format!("env_{}.csv", envs.len()));
            if !f.exists() {
                break;
            }
            envs.push(read_csv(&f)?);
        }
        if envs.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no env_*.csv files found",
                path.display()
            )));
        }
        Ok(Dataset { envs, manifest })
    } else {
        Ok(Dataset {
            envs: read_env_column_csv(path)?,
            manifest: None,
        })
    }
}

/// Per-variable standardization with pooled mean and standard deviation.
pub fn standardize(envs: &mut [DMatrix<f64>]) -> Result<(), CliError> {
    if envs.is_empty() {
        return Err(CliError::Data("no environments".into()));
    }
    let p = envs[0].ncols();
    let total: usize = envs.iter().map(|x| x.nrows()).sum();
    for j in 0..p {
        let mean: f64 = envs.iter().map(|x| x.column(j).sum()).sum::<f64>() / total as f64;
        let var: f64 = envs
            .iter()
            .map(|x| {
                x.column(j)
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / total as f64;
        if var <= 0.0 {
            return Err(CliError::Data(format!(
                "column {j} has zero pooled variance; cannot standardize"
            )));
        }
        let sd = var.sqrt();
        for x in envs.iter_mut() {
            for r in 0..x.nrows() {
                x[(r, j)] = (x[(r, j)] - mean) / sd;
            }
        }
    }
    Ok(())
}
