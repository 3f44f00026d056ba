//! The observed data matrix: binary (and optionally continuous) columns with
//! an explicit missingness mask.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlpcaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Continuous,
}

/// An `n × d` data matrix.
///
/// Missing cells are tracked by a boolean mask; the stored value of a missing
/// cell is always `0.0` and is never read by the model code. Binary cells hold
/// exactly `0.0` or `1.0`; continuous cells hold any finite real.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataMatrix {
    values: DMatrix<f64>,
    missing: DMatrix<bool>,
    kinds: Vec<ColumnKind>,
    names: Option<Vec<String>>,
}

impl BinaryDataMatrix {
    /// Complete binary data with no missing cells.
    pub fn from_binary(values: DMatrix<f64>) -> Result<Self> {
        let missing = DMatrix::from_element(values.nrows(), values.ncols(), false);
        let kinds = vec![ColumnKind::Binary; values.ncols()];
        Self::new(values, missing, kinds)
    }

    /// Binary data with a missingness mask (`true` marks a missing cell).
    pub fn from_binary_with_mask(values: DMatrix<f64>, missing: DMatrix<bool>) -> Result<Self> {
        let kinds = vec![ColumnKind::Binary; values.ncols()];
        Self::new(values, missing, kinds)
    }

    pub fn new(
        mut values: DMatrix<f64>,
        missing: DMatrix<bool>,
        kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        let (n, d) = values.shape();
        if n == 0 || d == 0 {
            return Err(SlpcaError::invalid("data matrix must have at least one row and one column"));
        }
        if missing.shape() != (n, d) {
            return Err(SlpcaError::dims(format!(
                "mask is {}x{} but values are {n}x{d}",
                missing.nrows(),
                missing.ncols()
            )));
        }
        if kinds.len() != d {
            return Err(SlpcaError::dims(format!(
                "{} column kinds for {d} columns",
                kinds.len()
            )));
        }
        for j in 0..d {
            for i in 0..n {
                if missing[(i, j)] {
                    values[(i, j)] = 0.0;
                    continue;
                }
                let v = values[(i, j)];
                match kinds[j] {
                    ColumnKind::Binary if v != 0.0 && v != 1.0 => {
                        return Err(SlpcaError::invalid(format!(
                            "binary cell (row {}, col {}) has value {v}",
                            i + 1,
                            j + 1
                        )));
                    }
                    ColumnKind::Continuous if !v.is_finite() => {
                        return Err(SlpcaError::invalid(format!(
                            "continuous cell (row {}, col {}) is not finite",
                            i + 1,
                            j + 1
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(BinaryDataMatrix {
            values,
            missing,
            kinds,
            names: None,
        })
    }

    /// Builds a matrix from rows of optional cells, `None` meaning missing.
    pub fn from_rows(rows: &[Vec<Option<f64>>], kinds: Vec<ColumnKind>) -> Result<Self> {
        let n = rows.len();
        let d = kinds.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(SlpcaError::dims(format!(
                "row {} has {} cells, expected {d}",
                i + 1,
                r.len()
            )));
        }
        let values = DMatrix::from_fn(n, d, |i, j| rows[i][j].unwrap_or(0.0));
        let missing = DMatrix::from_fn(n, d, |i, j| rows[i][j].is_none());
        Self::new(values, missing, kinds)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ncols() {
            return Err(SlpcaError::dims(format!(
                "{} column names for {} columns",
                names.len(),
                self.ncols()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn kind(&self, j: usize) -> ColumnKind {
        self.kinds[j]
    }

    /// Raw stored values; missing cells read as `0.0`.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn missing_mask(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing[(i, j)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if self.missing[(i, j)] {
            None
        } else {
            Some(self.values[(i, j)])
        }
    }

    /// `q = 2y − 1` for an observed binary cell.
    #[inline]
    pub fn sign(&self, i: usize, j: usize) -> f64 {
        2.0 * self.values[(i, j)] - 1.0
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn has_continuous(&self) -> bool {
        self.kinds.contains(&ColumnKind::Continuous)
    }

    /// Number of observed cells in continuous columns.
    pub fn observed_continuous_count(&self) -> usize {
        let (n, d) = self.shape();
        (0..d)
            .filter(|&j| self.kinds[j] == ColumnKind::Continuous)
            .map(|j| (0..n).filter(|&i| !self.missing[(i, j)]).count())
            .sum()
    }

    /// Mean of the observed cells of column `j`, or `None` if all are missing.
    pub fn column_mean(&self, j: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.nrows() {
            if !self.missing[(i, j)] {
                sum += self.values[(i, j)];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Same values, new missingness mask. Cells newly marked observed must
    /// already hold valid values.
    pub fn with_mask(&self, missing: DMatrix<bool>) -> Result<Self> {
        let mut out = Self::new(self.values.clone(), missing, self.kinds.clone())?;
        out.names = self.names.clone();
        Ok(out)
    }
}
