//! BIC and the staged grid search over the penalty λ and the rank k.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryDataMatrix;
use crate::error::{Result, SlpcaError};
use crate::model::{log_likelihood_clamped, SlpcaModel};
use crate::solver::{fit, fit_from, FitConfig, FitResult};

/// `m(λ) = d + n·k + |B(λ)|`, the number of free intercepts and scores plus
/// the nonzero loadings.
pub fn degrees_of_freedom(model: &SlpcaModel) -> usize {
    model.ncols() + model.nrows() * model.rank() + model.nnz()
}

/// `−2ℓ + log(n)·m(λ)` with ℓ the observed-data log-likelihood.
pub fn bic(data: &BinaryDataMatrix, result: &FitResult) -> Result<f64> {
    let ll = log_likelihood_clamped(data, &result.model, crate::model::DEFAULT_PROB_CLAMP)?;
    Ok(bic_from_parts(ll, degrees_of_freedom(&result.model), data.nrows()))
}

pub fn bic_from_parts(log_likelihood: f64, df: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + (n as f64).ln() * df as f64
}

/// `{0} ∪ {1.5^−18, …, 1.5^−10}`.
pub fn default_rough_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((10..=18).rev().map(|e| 1.5f64.powi(-e))).collect()
}

/// `{0, 0.0005, …, 0.01}`.
pub fn default_fine_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.0005).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// A standalone λ search.
    Lambda,
    /// λ over the rough grid at `k_init`.
    RoughLambda,
    /// k over `1..=k_max` at the rough-stage λ.
    Rank,
    /// λ over the fine grid at the selected k.
    FineLambda,
}

/// How consecutive λ grid points are started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridStart {
    /// Each fit starts from the previous one, in ascending λ order. Zeros are
    /// absorbing, so the support can only shrink along the path.
    #[default]
    Warm,
    /// Every grid point is fitted from the same seeded random start.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub k: usize,
    pub bic: f64,
    pub nnz: usize,
    pub df: usize,
    pub log_likelihood: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub stage: Stage,
    /// Rows in ascending λ (or k) order.
    pub rows: Vec<GridRow>,
    /// Index of the winning row; `None` only in a partial report.
    pub chosen: Option<usize>,
    /// Number of model fits performed.
    pub fits: usize,
    /// The fit of the winning row.
    pub best: Option<FitResult>,
}

impl SelectionReport {
    pub fn chosen_row(&self) -> Option<&GridRow> {
        self.chosen.map(|i| &self.rows[i])
    }
}

/// Everything the three-stage k search produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub k: usize,
    pub lambda: f64,
    pub rough: SelectionReport,
    pub rank: SelectionReport,
    pub fine: SelectionReport,
    pub fit: FitResult,
}

impl RankSelection {
    pub fn fits(&self) -> usize {
        self.rough.fits + self.rank.fits + self.fine.fits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Solver controls; `k` and `lambda` are overridden per grid point.
    pub fit: FitConfig,
    pub start: GridStart,
    pub k_init: usize,
    pub k_max: usize,
    pub rough_grid: Vec<f64>,
    pub fine_grid: Vec<f64>,
}

impl SelectionConfig {
    pub fn new(fit: FitConfig) -> Self {
        SelectionConfig {
            fit,
            start: GridStart::Warm,
            k_init: 30,
            k_max: 10,
            rough_grid: default_rough_grid(),
            fine_grid: default_fine_grid(),
        }
    }
}

/// BIC values tie when they differ by at most this relative amount.
const BIC_TIE: f64 = 1e-9;

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= BIC_TIE * a.abs().max(b.abs()).max(1.0)
}

/// Index of the minimal BIC; among ties the row preferred by `prefer` wins.
fn argmin_bic(rows: &[GridRow], prefer: impl Fn(&GridRow, &GridRow) -> bool) -> usize {
    let min = rows.iter().map(|r| r.bic).fold(f64::INFINITY, f64::min);
    let mut best = None::<usize>;
    for (i, r) in rows.iter().enumerate() {
        if !ties(r.bic, min) {
            continue;
        }
        best = match best {
            Some(b) if !prefer(r, &rows[b]) => Some(b),
            _ => Some(i),
        };
    }
    best.expect("nonempty grid")
}

fn row_of(data: &BinaryDataMatrix, result: &FitResult, lambda: f64) -> Result<GridRow> {
    let ll = log_likelihood_clamped(data, &result.model, crate::model::DEFAULT_PROB_CLAMP)?;
    let df = degrees_of_freedom(&result.model);
    Ok(GridRow {
        lambda,
        k: result.model.rank(),
        bic: bic_from_parts(ll, df, data.nrows()),
        nnz: result.nnz,
        df,
        log_likelihood: ll,
        objective: result.objective(),
        iterations: result.iterations,
        converged: result.converged,
    })
}

fn abort(stage: Stage, rows: Vec<GridRow>, fits: usize, err: SlpcaError) -> SlpcaError {
    SlpcaError::Selection {
        partial: Box::new(SelectionReport {
            stage,
            rows,
            chosen: None,
            fits,
            best: None,
        }),
        source: Box::new(err),
    }
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(SlpcaError::config("λ grid is empty"));
    }
    if grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(SlpcaError::config("λ grid entries must be finite and nonnegative"));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

fn lambda_search(
    data: &BinaryDataMatrix,
    k: usize,
    grid: &[f64],
    cfg: &SelectionConfig,
    stage: Stage,
) -> Result<SelectionReport> {
    let grid = sorted_grid(grid)?;
    let base = FitConfig {
        k,
        ..cfg.fit.clone()
    };
    base.validate()?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut fits = Vec::with_capacity(grid.len());
    match cfg.start {
        GridStart::Warm => {
            let mut prev: Option<FitResult> = None;
            for &lambda in &grid {
                let c = base.clone().with_lambda(lambda);
                let res = match &prev {
                    None => fit(data, &c),
                    Some(p) => fit_from(data, &c, &p.model),
                };
                let res = match res.and_then(|r| row_of(data, &r, lambda).map(|row| (r, row))) {
                    Ok(v) => v,
                    Err(e) => return Err(abort(stage, rows, fits.len() + 1, e)),
                };
                rows.push(res.1);
                prev = Some(res.0.clone());
                fits.push(res.0);
            }
        }
        GridStart::Fresh => {
            let out: Vec<Result<(FitResult, GridRow)>> = grid
                .par_iter()
                .map(|&lambda| {
                    let r = fit(data, &base.clone().with_lambda(lambda))?;
                    let row = row_of(data, &r, lambda)?;
                    Ok((r, row))
                })
                .collect();
            for (i, o) in out.into_iter().enumerate() {
                match o {
                    Ok((r, row)) => {
                        rows.push(row);
                        fits.push(r);
                    }
                    Err(e) => return Err(abort(stage, rows, i + 1, e)),
                }
            }
        }
    }
    // among BIC ties the larger λ (sparser model) wins
    let chosen = argmin_bic(&rows, |a, b| a.lambda > b.lambda);
    Ok(SelectionReport {
        stage,
        fits: rows.len(),
        rows,
        chosen: Some(chosen),
        best: Some(fits.swap_remove(chosen)),
    })
}

/// Fits every λ in `grid` at rank `k` and picks the BIC minimizer.
pub fn select_lambda(
    data: &BinaryDataMatrix,
    k: usize,
    grid: &[f64],
    cfg: &SelectionConfig,
) -> Result<SelectionReport> {
    lambda_search(data, k, grid, cfg, Stage::Lambda)
}

fn rank_search(data: &BinaryDataMatrix, lambda: f64, cfg: &SelectionConfig) -> Result<SelectionReport> {
    let mut rows = Vec::with_capacity(cfg.k_max);
    let mut fits = Vec::with_capacity(cfg.k_max);
    for k in 1..=cfg.k_max {
        let c = FitConfig {
            k,
            ..cfg.fit.clone()
        }
        .with_lambda(lambda);
        let (r, row) = match fit(data, &c).and_then(|r| row_of(data, &r, lambda).map(|row| (r, row))) {
            Ok(v) => v,
            Err(e) => return Err(abort(Stage::Rank, rows, k, e)),
        };
        rows.push(row);
        fits.push(r);
    }
    // among BIC ties the smaller rank wins
    let chosen = argmin_bic(&rows, |a, b| a.k < b.k);
    let best = Some(fits.swap_remove(chosen));
    Ok(SelectionReport {
        stage: Stage::Rank,
        fits: rows.len(),
        rows,
        chosen: Some(chosen),
        best,
    })
}

/// Three-stage search: λ over the rough grid at `k_init`, then k over
/// `1..=k_max` at that λ, then λ over the fine grid at the chosen k.
pub fn select_k(data: &BinaryDataMatrix, cfg: &SelectionConfig) -> Result<RankSelection> {
    let (n, d) = data.shape();
    let cap = n.min(d);
    if cfg.k_max == 0 || cfg.k_max > cap {
        return Err(SlpcaError::config(format!("k_max must lie in 1..={cap}")));
    }
    if cfg.k_init == 0 || cfg.k_init > cap {
        return Err(SlpcaError::config(format!("k_init must lie in 1..={cap}")));
    }
    let rough = lambda_search(data, cfg.k_init, &cfg.rough_grid, cfg, Stage::RoughLambda)?;
    let lambda1 = rough.chosen_row().expect("complete report").lambda;
    let rank = rank_search(data, lambda1, cfg)?;
    let k = rank.chosen_row().expect("complete report").k;
    let mut fine = lambda_search(data, k, &cfg.fine_grid, cfg, Stage::FineLambda)?;
    let fit = fine.best.take().expect("complete report");
    let lambda = fine.chosen_row().expect("complete report").lambda;
    fine.best = Some(fit.clone());
    Ok(RankSelection {
        k,
        lambda,
        rough,
        rank,
        fine,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let rough = default_rough_grid();
        assert_eq!(rough.len(), 10);
        assert_eq!(rough[0], 0.0);
        assert_eq!(rough[1], 1.5f64.powi(-18));
        assert_eq!(rough[9], 1.5f64.powi(-10));
        let fine = default_fine_grid();
        assert_eq!(fine.len(), 21);
        assert_eq!(fine[0], 0.0);
        assert!((fine[20] - 0.01).abs() < 1e-15);
        assert!((fine[3] - 0.0015).abs() < 1e-15);
    }

    #[test]
    fn bic_arithmetic() {
        assert!((bic_from_parts(0.0, 400, 100) - 1_842.068_074_395_237).abs() < 1e-9);
    }

    fn row(lambda: f64, k: usize, bic: f64) -> GridRow {
        GridRow {
            lambda,
            k,
            bic,
            nnz: 0,
            df: 0,
            log_likelihood: 0.0,
            objective: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn tie_breaks() {
        let rows = vec![row(0.0, 1, 5.0), row(0.1, 1, 5.0), row(0.2, 1, 6.0)];
        assert_eq!(argmin_bic(&rows, |a, b| a.lambda > b.lambda), 1);
        let rows = vec![row(0.0, 1, 7.0), row(0.0, 2, 5.0), row(0.0, 3, 5.0 + 1e-12)];
        assert_eq!(argmin_bic(&rows, |a, b| a.k < b.k), 1);
    }
}
