//! CSV ingestion for user datasets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use qls_core::Dataset;

use crate::error::{CliError, Result};

/// Which CSV columns play which role in the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnRoles {
    /// Absent for commands that never touch the outcome (`diagnose`).
    pub outcome: Option<String>,
    pub endogenous: String,
    pub controls: Vec<String>,
    pub instruments: Vec<String>,
    pub cluster: Option<String>,
}

impl ColumnRoles {
    fn numeric(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = self.outcome.iter().map(String::as_str).collect();
        cols.push(&self.endogenous);
        cols.extend(self.controls.iter().map(String::as_str));
        cols.extend(self.instruments.iter().map(String::as_str));
        cols
    }
}

/// A dataset together with what was dropped on the way in.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: Dataset,
    pub rows_read: usize,
    pub dropped_missing: usize,
    pub dropped_trim: usize,
    /// Upper cutoff applied to the endogenous column, if trimming was requested.
    pub trim_cutoff: Option<f64>,
}

impl LoadedData {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "read {} rows; dropped {} with missing values",
            self.rows_read, self.dropped_missing
        );
        if let Some(c) = self.trim_cutoff {
            s.push_str(&format!(
                "; dropped {} above the trim cutoff {c}",
                self.dropped_trim
            ));
        }
        s.push_str(&format!("; {} rows used", self.data.len()));
        s
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | ".")
}

/// Split a comma-separated column list, ignoring blanks.
pub fn split_columns(list: &str) -> Vec<String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Read a headed CSV file into a [`Dataset`].
///
/// Rows with a missing value in any referenced column are dropped and
/// counted. With `trim_upper_fraction = Some(q)` rows whose endogenous value
/// is strictly greater than the empirical `1 - q` quantile are dropped; ties
/// at the cutoff are kept.
pub fn load_csv(
    path: &Path,
    roles: &ColumnRoles,
    trim_upper_fraction: Option<f64>,
) -> Result<LoadedData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => CliError::io(path, io),
                _ => unreachable!(),
            },
            _ => CliError::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    if headers.is_empty()
        || headers
            .iter()
            .all(|h| h.is_empty() || h.parse::<f64>().is_ok())
    {
        return Err(CliError::Parse {
            path: path.to_owned(),
            line: 1,
            message: "missing header row (expected column names)".into(),
        });
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn {
                path: path.to_owned(),
                column: name.to_owned(),
            })
    };
    let names = roles.numeric();
    let idx = names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let cluster_idx = roles.cluster.as_deref().map(find).transpose()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut rows_read = 0;
    let mut dropped_missing = 0;
    for record in reader.records() {
        let record = record?;
        rows_read += 1;
        let line = record.position().map_or(rows_read as u64 + 1, |p| p.line());
        let label = cluster_idx.map(|j| record.get(j).unwrap_or("").to_owned());
        if label.as_deref().is_some_and(is_missing) {
            dropped_missing += 1;
            continue;
        }
        let mut values = Vec::with_capacity(idx.len());
        let mut missing = false;
        for (&j, name) in idx.iter().zip(&names) {
            let cell = record.get(j).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| CliError::Parse {
                path: path.to_owned(),
                line,
                message: format!("column '{name}': cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(CliError::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!("column '{name}': non-finite value '{cell}'"),
                });
            }
            values.push(v);
        }
        if missing {
            dropped_missing += 1;
            continue;
        }
        rows.push(values);
        if let Some(l) = label {
            labels.push(l);
        }
    }

    let endog_col = usize::from(roles.outcome.is_some());
    let (trim_cutoff, dropped_trim) = match trim_upper_fraction {
        None => (None, 0),
        Some(q) => {
            if !(0.0..1.0).contains(&q) {
                return Err(CliError::config(
                    "trim-top",
                    format!("fraction {q} outside [0, 1)"),
                ));
            }
            let endog: Vec<f64> = rows.iter().map(|r| r[endog_col]).collect();
            let cutoff = empirical_quantile(&endog, 1.0 - q);
            let before = rows.len();
            let keep: Vec<bool> = endog.iter().map(|&v| v <= cutoff).collect();
            let mut it = keep.iter();
            rows.retain(|_| *it.next().unwrap());
            if !labels.is_empty() {
                let mut it = keep.iter();
                labels.retain(|_| *it.next().unwrap());
            }
            (Some(cutoff), before - rows.len())
        }
    };

    let n = rows.len();
    if n == 0 {
        return Err(CliError::Degenerate(format!(
            "{}: no complete rows",
            path.display()
        )));
    }
    let col = |j: usize| DVector::from_fn(n, |i, _| rows[i][j]);
    let block =
        |offset: usize, width: usize| DMatrix::from_fn(n, width, |i, j| rows[i][offset + j]);
    let endogenous = col(endog_col);
    let mean = endogenous.mean();
    if endogenous
        .iter()
        .all(|&v| (v - mean).abs() <= 1e-12 * mean.abs().max(1.0))
    {
        return Err(CliError::Degenerate(format!(
            "endogenous column '{}' has zero variance",
            roles.endogenous
        )));
    }
    let outcome = if roles.outcome.is_some() {
        col(0)
    } else {
        DVector::zeros(n)
    };
    let q = roles.controls.len();
    let controls = block(endog_col + 1, q);
    let instruments = block(endog_col + 1 + q, roles.instruments.len());
    let mut data = Dataset::new(outcome, endogenous, controls, instruments)?
        .with_names(roles.controls.clone(), roles.instruments.clone())?;
    if roles.cluster.is_some() {
        data = data.with_clusters(&labels)?;
    }
    Ok(LoadedData {
        data,
        rows_read,
        dropped_missing,
        dropped_trim,
        trim_cutoff,
    })
}

/// Inverse of the empirical distribution function (type 1): the smallest
/// sample value whose empirical CDF reaches `p`.
pub fn empirical_quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Write a dataset as CSV with columns `y, x, <controls>, <instruments>`.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::Csv)?;
    let mut header = vec!["y".to_string(), "x".to_string()];
    header.extend(data.control_names.iter().cloned());
    header.extend(data.instrument_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![
            format!("{:e}", data.outcome[i]),
            format!("{:e}", data.endogenous[i]),
        ];
        rec.extend(data.controls.row(i).iter().map(|v| format!("{v:e}")));
        rec.extend(data.instruments.row(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
