//! CSV in and out.
//!
//! Matrices are read as comma-separated text with an optional header row.
//! Every float written by this crate goes through [`fmt_f64`], which keeps 17
//! significant digits so that values survive a write/read round trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use slpca::{BinaryDataMatrix, ColumnKind, Link, SlpcaModel};

use crate::error::CliError;

/// Token for a missing cell, in input and output alike.
pub const NA: &str = "NA";

/// Shortest exact text for `x`: `0` for zeros, `NA` for NaN and otherwise
/// scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else if x.is_nan() {
        NA.to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Path of the optional column-kind override next to a data file.
pub fn schema_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".schema");
    PathBuf::from(s)
}

fn parse_schema(text: &str, d: usize, path: &Path) -> Result<Vec<ColumnKind>, CliError> {
    let kinds = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t.to_ascii_lowercase().as_str() {
            "binary" => Ok(ColumnKind::Binary),
            "continuous" => Ok(ColumnKind::Continuous),
            other => Err(CliError::validation(format!(
                "{}: unknown column kind '{other}'",
                path.display()
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if kinds.len() != d {
        return Err(CliError::validation(format!(
            "{}: {} column kinds for {d} columns",
            path.display(),
            kinds.len()
        )));
    }
    Ok(kinds)
}

fn csv_records(text: &str, path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn is_data_cell(s: &str) -> bool {
    s == NA || s.parse::<f64>().is_ok()
}

/// Loads a data matrix.
///
/// The first row is a header when any of its cells is neither a number nor
/// `NA`. A column is continuous when it holds a non-integer value; otherwise
/// it is binary and every observed cell must be 0 or 1. A sidecar file named
/// `<path>.schema` listing one kind per column (`binary` or `continuous`)
/// overrides the inference. Rows and columns in error messages count from 1,
/// excluding the header.
pub fn load_matrix(path: &Path) -> Result<BinaryDataMatrix, CliError> {
    let text = read_text(path)?;
    let mut records = csv_records(&text, path)?;
    records.retain(|r| !(r.len() == 1 && r[0].is_empty()));
    if records.is_empty() {
        return Err(CliError::validation(format!("{}: empty file", path.display())));
    }
    let names = if records[0].iter().all(|c| is_data_cell(c)) {
        None
    } else {
        Some(records.remove(0))
    };
    if records.is_empty() {
        return Err(CliError::validation(format!("{}: no data rows", path.display())));
    }
    let d = names.as_ref().map_or(records[0].len(), Vec::len);
    if d == 0 {
        return Err(CliError::validation(format!("{}: no columns", path.display())));
    }

    let mut cells: Vec<Vec<Option<f64>>> = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != d {
            return Err(CliError::validation(format!(
                "{}: ragged rows: row {} has {} cells, expected {d}",
                path.display(),
                i + 1,
                rec.len()
            )));
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if s == NA {
                    return Ok(None);
                }
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(CliError::validation(format!(
                        "{}: malformed cell '{s}' at (row {}, col {})",
                        path.display(),
                        i + 1,
                        j + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        cells.push(row);
    }

    let schema = schema_path(path);
    let kinds = if schema.exists() {
        parse_schema(&read_text(&schema)?, d, &schema)?
    } else {
        (0..d)
            .map(|j| {
                let real = cells.iter().any(|r| r[j].is_some_and(|v| v.fract() != 0.0));
                if real {
                    ColumnKind::Continuous
                } else {
                    ColumnKind::Binary
                }
            })
            .collect()
    };
    for (i, row) in cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let (ColumnKind::Binary, Some(v)) = (kinds[j], v) {
                if *v != 0.0 && *v != 1.0 {
                    return Err(CliError::validation(format!(
                        "{}: cell '{}' at (row {}, col {}) is not 0, 1 or NA",
                        path.display(),
                        records[i][j],
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
    }

    let data = BinaryDataMatrix::from_rows(&cells, kinds)?;
    match names {
        Some(n) => Ok(data.with_names(n)?),
        None => Ok(data),
    }
}

/// Column names, falling back to 1-based indices.
pub fn variable_names(data: &BinaryDataMatrix) -> Vec<String> {
    match data.names() {
        Some(n) => n.to_vec(),
        None => (1..=data.ncols()).map(|j| j.to_string()).collect(),
    }
}

/// Writes rows of already formatted cells under a header.
pub fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => CliError::io(path, e),
        other => CliError::validation(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(&r).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn component_header(first: &str, k: usize) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain((1..=k).map(|l| format!("pc{l}")))
        .collect()
}

fn labelled_rows(labels: &[String], m: &DMatrix<f64>) -> Vec<Vec<String>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, name)| {
            std::iter::once(name.clone())
                .chain(m.row(i).iter().map(|&v| fmt_f64(v)))
                .collect()
        })
        .collect()
}

/// Reads a labelled numeric table written by [`write_rows`]: header, then a
/// label column followed by numbers.
pub fn read_labelled_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>), CliError> {
    let text = read_text(path)?;
    let mut records = csv_records(&text, path)?;
    if records.is_empty() {
        return Err(CliError::validation(format!("{}: empty file", path.display())));
    }
    let header = records.remove(0);
    let width = header.len().saturating_sub(1);
    let mut labels = Vec::with_capacity(records.len());
    let mut values = Vec::with_capacity(records.len() * width);
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != width + 1 {
            return Err(CliError::validation(format!(
                "{}: ragged rows: row {} has {} cells, expected {}",
                path.display(),
                i + 1,
                rec.len(),
                width + 1
            )));
        }
        labels.push(rec[0].clone());
        for (j, s) in rec[1..].iter().enumerate() {
            let v = if s == NA {
                f64::NAN
            } else {
                s.parse::<f64>().map_err(|_| {
                    CliError::validation(format!(
                        "{}: malformed cell '{s}' at (row {}, col {})",
                        path.display(),
                        i + 1,
                        j + 2
                    ))
                })?
            };
            values.push(v);
        }
    }
    let m = DMatrix::from_row_slice(labels.len(), width, &values);
    Ok((labels, m))
}

/// Headline numbers of a fit, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub link: Link,
    /// Penalty of the first component; all components share it unless set per component.
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub nnz: usize,
    pub objective: f64,
    pub log_likelihood: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sigma2: Option<f64>,
}

/// Writes `mu.csv`, `scores.csv`, `loadings.csv`, `trace.csv` and
/// `summary.json` into `dir`. The manifest is written separately by the
/// command, once all of its outputs exist.
pub fn write_model(
    data: &BinaryDataMatrix,
    result: &slpca::FitResult,
    dir: &Path,
) -> Result<FitSummary, CliError> {
    ensure_dir(dir)?;
    let model = &result.model;
    let names = variable_names(data);
    let k = model.rank();

    write_rows(
        &dir.join("mu.csv"),
        &["variable".to_string(), "mu".to_string()],
        names.iter().zip(model.mu().iter()).map(|(n, &m)| vec![n.clone(), fmt_f64(m)]),
    )?;
    let row_labels: Vec<String> = (1..=model.nrows()).map(|i| i.to_string()).collect();
    write_rows(
        &dir.join("scores.csv"),
        &component_header("row", k),
        labelled_rows(&row_labels, model.scores()),
    )?;
    write_rows(
        &dir.join("loadings.csv"),
        &component_header("variable", k),
        labelled_rows(&names, model.loadings()),
    )?;
    write_rows(
        &dir.join("trace.csv"),
        &["iteration".to_string(), "objective".to_string()],
        result
            .objective_trace
            .iter()
            .enumerate()
            .map(|(t, &v)| vec![t.to_string(), fmt_f64(v)]),
    )?;

    let log_likelihood = slpca::log_likelihood(data, model)?;
    let summary = FitSummary {
        n: model.nrows(),
        d: model.ncols(),
        k,
        link: model.link(),
        lambda: model.lambda().first().copied().unwrap_or(0.0),
        lambdas: model.lambda().to_vec(),
        nnz: result.nnz,
        objective: result.objective(),
        log_likelihood,
        bic: slpca::bic(data, result)?,
        iterations: result.iterations,
        converged: result.converged,
        sigma2: model.sigma2(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reloads a model written by [`write_model`].
pub fn read_model(dir: &Path) -> Result<SlpcaModel, CliError> {
    let summary: FitSummary = read_json(&dir.join("summary.json"))?;
    let (_, mu) = read_labelled_matrix(&dir.join("mu.csv"))?;
    let (_, scores) = read_labelled_matrix(&dir.join("scores.csv"))?;
    let (_, loadings) = read_labelled_matrix(&dir.join("loadings.csv"))?;
    if mu.ncols() != 1 {
        return Err(CliError::validation(format!("{}: expected one mu column", dir.display())));
    }
    let mu = DVector::from_column_slice(mu.as_slice());
    Ok(SlpcaModel::new(
        mu,
        scores,
        loadings,
        summary.link,
        summary.lambdas,
        summary.sigma2,
    )?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}
