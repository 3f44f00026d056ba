//! Fitted parameters and the penalized criterion every other module evaluates.
//!
//! The canonical parameter matrix is `Θ = 1μᵀ + ABᵀ`. Binary cells contribute
//! `log P(y | θ)` under the chosen link; continuous cells contribute on the
//! Gaussian deviance scale, `−(y − θ)²/σ² − log(2πσ²)`, which is the scale on
//! which the `1/σ²` working weight of the solver is an exact surrogate.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryDataMatrix, ColumnKind};
use crate::error::{Result, SlpcaError};
use crate::link::Link;

/// Default probability clamp used inside likelihood evaluation.
pub const DEFAULT_PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlpcaModel {
    mu: DVector<f64>,
    scores: DMatrix<f64>,
    loadings: DMatrix<f64>,
    link: Link,
    lambda: Vec<f64>,
    sigma2: Option<f64>,
}

impl SlpcaModel {
    pub fn new(
        mu: DVector<f64>,
        scores: DMatrix<f64>,
        loadings: DMatrix<f64>,
        link: Link,
        lambda: Vec<f64>,
        sigma2: Option<f64>,
    ) -> Result<Self> {
        let k = scores.ncols();
        if loadings.ncols() != k {
            return Err(SlpcaError::dims(format!(
                "scores have {k} columns but loadings have {}",
                loadings.ncols()
            )));
        }
        if loadings.nrows() != mu.len() {
            return Err(SlpcaError::dims(format!(
                "loadings have {} rows but mu has length {}",
                loadings.nrows(),
                mu.len()
            )));
        }
        if lambda.len() != k {
            return Err(SlpcaError::dims(format!("lambda has length {} for rank {k}", lambda.len())));
        }
        if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(SlpcaError::invalid("lambda entries must be finite and nonnegative"));
        }
        if let Some(s) = sigma2 {
            if !(s > 0.0) || !s.is_finite() {
                return Err(SlpcaError::invalid(format!("sigma2 must be positive, got {s}")));
            }
        }
        Ok(SlpcaModel {
            mu,
            scores,
            loadings,
            link,
            lambda,
            sigma2,
        })
    }

    pub(crate) fn from_parts_unchecked(
        mu: DVector<f64>,
        scores: DMatrix<f64>,
        loadings: DMatrix<f64>,
        link: Link,
        lambda: Vec<f64>,
        sigma2: Option<f64>,
    ) -> Self {
        SlpcaModel {
            mu,
            scores,
            loadings,
            link,
            lambda,
            sigma2,
        }
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `A`, the `n × k` score matrix.
    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    /// `B`, the `d × k` loading matrix.
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn sigma2(&self) -> Option<f64> {
        self.sigma2
    }

    pub fn nrows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.scores.ncols()
    }

    /// Count of loadings that are not exactly zero.
    pub fn nnz(&self) -> usize {
        self.loadings.iter().filter(|&&b| b != 0.0).count()
    }

    /// Same parameters under a different penalty vector.
    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != self.rank() || lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(SlpcaError::invalid("lambda must be nonnegative with one entry per component"));
        }
        self.lambda = lambda;
        Ok(self)
    }

    fn check_against(&self, data: &BinaryDataMatrix) -> Result<()> {
        if data.shape() != (self.nrows(), self.ncols()) {
            return Err(SlpcaError::dims(format!(
                "model is {}x{} but data is {}x{}",
                self.nrows(),
                self.ncols(),
                data.nrows(),
                data.ncols()
            )));
        }
        if data.has_continuous() && self.sigma2.is_none() {
            return Err(SlpcaError::invalid("data has continuous columns but the model has no sigma2"));
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum. Sequential, so results are reproducible
/// bit-for-bit for a fixed input order.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `Θ = 1μᵀ + ABᵀ`.
pub fn canonical_matrix(model: &SlpcaModel) -> DMatrix<f64> {
    let mut theta = &model.scores * model.loadings.transpose();
    for (j, mut col) in theta.column_iter_mut().enumerate() {
        col.add_scalar_mut(model.mu[j]);
    }
    theta
}

/// Elementwise link inverse of the canonical matrix.
pub fn probabilities(model: &SlpcaModel) -> DMatrix<f64> {
    canonical_matrix(model).map(|t| model.link.inverse(t))
}

/// Clamped per-cell `log P(y_ij | θ_ij)` for a binary cell.
#[inline]
pub(crate) fn binary_cell_loglik(link: Link, q: f64, theta: f64, prob_clamp: f64) -> f64 {
    let lo = prob_clamp.ln();
    let hi = (-prob_clamp).ln_1p();
    link.log_prob(q * theta).clamp(lo, hi)
}

#[inline]
pub(crate) fn continuous_cell_loglik(y: f64, theta: f64, sigma2: f64) -> f64 {
    let r = y - theta;
    -(r * r) / sigma2 - (2.0 * PI * sigma2).ln()
}

/// Log-likelihood of the observed cells given a canonical matrix.
pub(crate) fn log_likelihood_theta(
    data: &BinaryDataMatrix,
    theta: &DMatrix<f64>,
    link: Link,
    sigma2: Option<f64>,
    prob_clamp: f64,
) -> f64 {
    let (n, d) = data.shape();
    let mut acc = CompensatedSum::default();
    for j in 0..d {
        match data.kind(j) {
            ColumnKind::Binary => {
                for i in 0..n {
                    if !data.is_missing(i, j) {
                        acc.add(binary_cell_loglik(link, data.sign(i, j), theta[(i, j)], prob_clamp));
                    }
                }
            }
            ColumnKind::Continuous => {
                let s2 = sigma2.expect("sigma2 checked by caller");
                for i in 0..n {
                    if let Some(y) = data.get(i, j) {
                        acc.add(continuous_cell_loglik(y, theta[(i, j)], s2));
                    }
                }
            }
        }
    }
    acc.value()
}

/// Observed-data log-likelihood with the default probability clamp.
pub fn log_likelihood(data: &BinaryDataMatrix, model: &SlpcaModel) -> Result<f64> {
    log_likelihood_clamped(data, model, DEFAULT_PROB_CLAMP)
}

pub fn log_likelihood_clamped(
    data: &BinaryDataMatrix,
    model: &SlpcaModel,
    prob_clamp: f64,
) -> Result<f64> {
    model.check_against(data)?;
    let theta = canonical_matrix(model);
    Ok(log_likelihood_theta(data, &theta, model.link, model.sigma2, prob_clamp))
}

/// `Σ_l λ_l Σ_j |b_jl|`.
pub fn penalty_value(loadings: &DMatrix<f64>, lambda: &[f64]) -> Result<f64> {
    if lambda.len() != loadings.ncols() {
        return Err(SlpcaError::dims(format!(
            "lambda has length {} but loadings have {} columns",
            lambda.len(),
            loadings.ncols()
        )));
    }
    if let Some(l) = lambda.iter().find(|&&l| !(l >= 0.0)) {
        return Err(SlpcaError::invalid(format!("negative penalty {l}")));
    }
    Ok(penalty_unchecked(loadings, lambda))
}

pub(crate) fn penalty_unchecked(loadings: &DMatrix<f64>, lambda: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    for (l, col) in loadings.column_iter().enumerate() {
        if lambda[l] == 0.0 {
            continue;
        }
        let mut s = CompensatedSum::default();
        for b in col.iter() {
            s.add(b.abs());
        }
        acc.add(lambda[l] * s.value());
    }
    acc.value()
}

/// `−ℓ + n·P_λ(B)`; the likelihood runs over observed cells only.
pub fn penalized_objective(data: &BinaryDataMatrix, model: &SlpcaModel) -> Result<f64> {
    penalized_objective_clamped(data, model, DEFAULT_PROB_CLAMP)
}

pub fn penalized_objective_clamped(
    data: &BinaryDataMatrix,
    model: &SlpcaModel,
    prob_clamp: f64,
) -> Result<f64> {
    let ll = log_likelihood_clamped(data, model, prob_clamp)?;
    let pen = penalty_value(&model.loadings, &model.lambda)?;
    Ok(-ll + data.nrows() as f64 * pen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn rank_one(mu: DVector<f64>, a: DMatrix<f64>, b: DMatrix<f64>, lambda: f64) -> SlpcaModel {
        SlpcaModel::new(mu, a, b, Link::Logit, vec![lambda], None).unwrap()
    }

    #[test]
    fn single_cell_at_zero() {
        let data = BinaryDataMatrix::from_binary(dmatrix![1.0]).unwrap();
        let m = rank_one(dvector![0.0], dmatrix![1.0], dmatrix![0.0], 0.0);
        assert_abs_diff_eq!(log_likelihood(&data, &m).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn two_by_one_hand_value() {
        // θ = (1, −1) from μ = 0, a = (1, −1)/√2, b = √2
        let data = BinaryDataMatrix::from_binary(dmatrix![1.0; 0.0]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = rank_one(dvector![0.0], dmatrix![s; -s], dmatrix![2f64.sqrt()], 0.0);
        assert_abs_diff_eq!(
            log_likelihood(&data, &m).unwrap(),
            -0.626_523_375_036_445_7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn composed_objective_hand_value() {
        // same likelihood as above but realized with B = (0.5), λ = 0.1, n = 2
        let data = BinaryDataMatrix::from_binary(dmatrix![1.0; 0.0]).unwrap();
        let m = rank_one(dvector![0.0], dmatrix![2.0; -2.0], dmatrix![0.5], 0.1);
        let s = penalized_objective(&data, &m).unwrap();
        assert_abs_diff_eq!(s, 0.626_523_375_036_445_7 + 2.0 * 0.05, epsilon = 1e-12);
    }

    #[test]
    fn all_missing_likelihood_is_zero() {
        let data = BinaryDataMatrix::from_binary_with_mask(
            dmatrix![1.0, 0.0; 0.0, 1.0],
            DMatrix::from_element(2, 2, true),
        )
        .unwrap();
        let m = SlpcaModel::new(
            dvector![0.3, -0.2],
            dmatrix![1.0; 0.0],
            dmatrix![0.4; -0.7],
            Link::Logit,
            vec![0.25],
            None,
        )
        .unwrap();
        assert_eq!(log_likelihood(&data, &m).unwrap(), 0.0);
        let pen = penalty_value(m.loadings(), m.lambda()).unwrap();
        assert_eq!(penalized_objective(&data, &m).unwrap(), 2.0 * pen);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_value(&dmatrix![1.0; -2.0; 0.0], &[0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(penalty_value(&dmatrix![1.0; -2.0; 0.0], &[0.1]).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(penalty_value(&DMatrix::identity(2, 2), &[0.5, 2.0]).unwrap(), 2.5);
        assert!(penalty_value(&DMatrix::identity(2, 2), &[0.5, -1.0]).is_err());
        assert!(penalty_value(&DMatrix::identity(2, 2), &[0.5]).is_err());
    }

    #[test]
    fn canonical_matrix_examples() {
        let m = SlpcaModel::new(
            dvector![0.5, -1.0, 2.0],
            DMatrix::zeros(4, 1),
            dmatrix![1.0; 2.0; 3.0],
            Link::Logit,
            vec![0.0],
            None,
        )
        .unwrap();
        let theta = canonical_matrix(&m);
        for i in 0..4 {
            assert_eq!(theta.row(i).transpose(), *m.mu());
        }

        let mut a = DMatrix::zeros(3, 1);
        a[(0, 0)] = 1.0;
        let mut b = DMatrix::zeros(2, 1);
        b[(0, 0)] = 1.0;
        let m = SlpcaModel::new(DVector::zeros(2), a, b, Link::Logit, vec![0.0], None).unwrap();
        let theta = canonical_matrix(&m);
        let mut expected = DMatrix::zeros(3, 2);
        expected[(0, 0)] = 1.0;
        assert_eq!(theta, expected);
    }

    #[test]
    fn probabilities_under_both_links() {
        let zero = |link| {
            SlpcaModel::new(DVector::zeros(2), DMatrix::zeros(3, 1), DMatrix::zeros(2, 1), link, vec![0.0], None)
                .unwrap()
        };
        assert!(probabilities(&zero(Link::Logit)).iter().all(|&p| p == 0.5));
        assert!(probabilities(&zero(Link::Probit)).iter().all(|&p| p == 0.5));

        let at = |link, t: f64| {
            SlpcaModel::new(dvector![t], dmatrix![0.0], dmatrix![0.0], link, vec![0.0], None).unwrap()
        };
        assert_abs_diff_eq!(probabilities(&at(Link::Logit, 2.0))[(0, 0)], 0.880_797_077_977_882_4, epsilon = 1e-15);
        assert_abs_diff_eq!(probabilities(&at(Link::Probit, 1.0))[(0, 0)], 0.841_344_746_068_543, epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let data = BinaryDataMatrix::from_binary(dmatrix![1.0, 0.0]).unwrap();
        let m = rank_one(dvector![0.0], dmatrix![1.0], dmatrix![0.0], 0.0);
        assert!(log_likelihood(&data, &m).is_err());
    }

    #[test]
    fn clamp_keeps_objective_finite() {
        let data = BinaryDataMatrix::from_binary(dmatrix![0.0]).unwrap();
        let m = rank_one(dvector![1e6], dmatrix![0.0], dmatrix![0.0], 0.0);
        let ll = log_likelihood(&data, &m).unwrap();
        assert_abs_diff_eq!(ll, DEFAULT_PROB_CLAMP.ln(), epsilon = 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::default();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }
}
