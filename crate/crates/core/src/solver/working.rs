//! Working responses `x` and weights `w` of the quadratic surrogate
//! `Σ w_ij (θ_ij − x_ij)²` built at the current canonical matrix.

use nalgebra::{DMatrix, DVector};

use crate::data::{BinaryDataMatrix, ColumnKind};
use crate::error::{Result, SlpcaError};
use crate::link::{inverse_mills_ratio, logistic, Link};

use super::Bound;

/// Curvature of the uniform logistic bound.
pub const UNIFORM_WEIGHT: f64 = 0.125;
/// Curvature of the probit bound.
pub const PROBIT_WEIGHT: f64 = 0.5;
/// Below this `|θ|` the tight-bound curvature takes its limit `1/8`.
pub const TIGHT_ORIGIN: f64 = 1e-4;

/// Working responses and weights for every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingValues {
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Every column carries a single weight (uniform logit, probit, Gaussian).
    /// The score and loading updates then have closed forms.
    pub column_constant: bool,
}

impl WorkingValues {
    pub(crate) fn column_weights(&self) -> DVector<f64> {
        self.w.row(0).transpose()
    }
}

/// `(x, w)` for one binary cell under the uniform bound.
#[inline]
pub fn uniform_cell(theta: f64, q: f64) -> (f64, f64) {
    (theta + 4.0 * q * (1.0 - logistic(q * theta)), UNIFORM_WEIGHT)
}

/// Tight-bound curvature `{2π(θ) − 1}/(4θ) = tanh(θ/2)/(4θ)`; symmetric in θ.
#[inline]
pub fn tight_weight(theta: f64) -> f64 {
    if theta.abs() < TIGHT_ORIGIN {
        UNIFORM_WEIGHT
    } else {
        (0.5 * theta).tanh() / (4.0 * theta)
    }
}

#[inline]
pub fn tight_cell(theta: f64, q: f64) -> (f64, f64) {
    let w = tight_weight(theta);
    (theta + q * (1.0 - logistic(q * theta)) / (2.0 * w), w)
}

#[inline]
pub fn probit_cell(theta: f64, q: f64) -> (f64, f64) {
    (theta + q * inverse_mills_ratio(q * theta), PROBIT_WEIGHT)
}

/// Weight of a binary cell whose value is unobserved.
#[inline]
fn binary_missing_weight(link: Link, bound: Bound, theta: f64) -> f64 {
    match (link, bound) {
        (Link::Probit, _) => PROBIT_WEIGHT,
        (Link::Logit, Bound::Uniform) => UNIFORM_WEIGHT,
        (Link::Logit, Bound::Tight) => tight_weight(theta),
    }
}

fn binary_working(
    theta: &DMatrix<f64>,
    data: &BinaryDataMatrix,
    cell: impl Fn(f64, f64) -> (f64, f64),
    column_constant: bool,
) -> WorkingValues {
    let (n, d) = data.shape();
    let mut x = DMatrix::from_element(n, d, f64::NAN);
    let mut w = DMatrix::from_element(n, d, f64::NAN);
    for j in 0..d {
        if data.kind(j) != ColumnKind::Binary {
            continue;
        }
        for i in 0..n {
            if !data.is_missing(i, j) {
                let (xv, wv) = cell(theta[(i, j)], data.sign(i, j));
                x[(i, j)] = xv;
                w[(i, j)] = wv;
            }
        }
    }
    WorkingValues {
        x,
        w,
        column_constant,
    }
}

/// Working values of the uniform bound on observed binary cells. Other cells
/// are left as NaN for [`impute_missing`] or the Gaussian rule to fill.
pub fn working_values_uniform(theta: &DMatrix<f64>, data: &BinaryDataMatrix) -> WorkingValues {
    binary_working(theta, data, uniform_cell, true)
}

pub fn working_values_tight(theta: &DMatrix<f64>, data: &BinaryDataMatrix) -> WorkingValues {
    binary_working(theta, data, tight_cell, false)
}

pub fn working_values_probit(theta: &DMatrix<f64>, data: &BinaryDataMatrix) -> WorkingValues {
    binary_working(theta, data, probit_cell, true)
}

/// Identity working values for continuous column `col`: `x = y`, `w = 1/σ²`.
/// Missing cells get `x = NaN` pending imputation.
pub fn working_values_gaussian(
    data: &BinaryDataMatrix,
    col: usize,
    sigma2: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(sigma2 > 0.0) {
        return Err(SlpcaError::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if data.kind(col) != ColumnKind::Continuous {
        return Err(SlpcaError::invalid(format!("column {} is not continuous", col + 1)));
    }
    let n = data.nrows();
    let x = DVector::from_fn(n, |i, _| data.get(i, col).unwrap_or(f64::NAN));
    Ok((x, DVector::from_element(n, 1.0 / sigma2)))
}

/// Replaces masked cells of `x` by the current fitted `θ`; other cells are
/// left untouched.
pub fn impute_missing(x: &mut DMatrix<f64>, theta: &DMatrix<f64>, mask: &DMatrix<bool>) {
    for ((xv, &t), &m) in x.iter_mut().zip(theta.iter()).zip(mask.iter()) {
        if m {
            *xv = t;
        }
    }
}

/// Full working values for one MM cycle: the link/bound rule on binary
/// columns, the Gaussian rule on continuous ones, and imputation of every
/// missing cell with its current `θ` (weight from the same rule).
pub fn build_working(
    theta: &DMatrix<f64>,
    data: &BinaryDataMatrix,
    link: Link,
    bound: Bound,
    sigma2: Option<f64>,
) -> Result<WorkingValues> {
    let mut wv = match (link, bound) {
        (Link::Probit, _) => working_values_probit(theta, data),
        (Link::Logit, Bound::Uniform) => working_values_uniform(theta, data),
        (Link::Logit, Bound::Tight) => working_values_tight(theta, data),
    };
    for j in 0..data.ncols() {
        if data.kind(j) == ColumnKind::Continuous {
            let s2 = sigma2.ok_or_else(|| SlpcaError::invalid("continuous column without sigma2"))?;
            let (x, w) = working_values_gaussian(data, j, s2)?;
            wv.x.set_column(j, &x);
            wv.w.set_column(j, &w);
        } else {
            for i in 0..data.nrows() {
                if data.is_missing(i, j) {
                    wv.w[(i, j)] = binary_missing_weight(link, bound, theta[(i, j)]);
                }
            }
        }
    }
    if data.has_missing() {
        impute_missing(&mut wv.x, theta, data.missing_mask());
    }
    Ok(wv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn single(y: f64) -> BinaryDataMatrix {
        BinaryDataMatrix::from_binary(dmatrix![y]).unwrap()
    }

    #[test]
    fn uniform_examples() {
        let wv = working_values_uniform(&dmatrix![0.0], &single(1.0));
        assert_eq!((wv.x[(0, 0)], wv.w[(0, 0)]), (2.0, 0.125));
        let wv = working_values_uniform(&dmatrix![0.0], &single(0.0));
        assert_eq!(wv.x[(0, 0)], -2.0);
        let wv = working_values_uniform(&dmatrix![2.0], &single(1.0));
        assert_abs_diff_eq!(wv.x[(0, 0)], 2.476_811_688_088_470_2, epsilon = 1e-14);
    }

    #[test]
    fn tight_examples() {
        assert_eq!(tight_weight(0.0), 0.125);
        assert_eq!(tight_weight(5e-5), 0.125);
        // just outside the cutoff the analytic form is continuous with the limit
        assert_abs_diff_eq!(tight_weight(1.0001e-4), 0.125, epsilon = 1e-9);
        let wv = working_values_tight(&dmatrix![2.0], &single(1.0));
        assert_abs_diff_eq!(wv.w[(0, 0)], 0.095_199_269_494_470_6, epsilon = 1e-15);
        assert_abs_diff_eq!(wv.x[(0, 0)], 2.626_070_570_998_662_6, epsilon = 1e-13);
    }

    #[test]
    fn tight_curvature_never_exceeds_uniform() {
        for i in 0..=60_000 {
            let t = -30.0 + i as f64 * 1e-3;
            let w = tight_weight(t);
            assert!(w > 0.0 && w <= UNIFORM_WEIGHT, "w({t}) = {w}");
        }
    }

    #[test]
    fn probit_examples() {
        let wv = working_values_probit(&dmatrix![0.0], &single(1.0));
        assert_abs_diff_eq!(wv.x[(0, 0)], 0.797_884_560_802_865_4, epsilon = 1e-14);
        assert_eq!(wv.w[(0, 0)], 0.5);
        let wv = working_values_probit(&dmatrix![0.0], &single(0.0));
        assert_abs_diff_eq!(wv.x[(0, 0)], -0.797_884_560_802_865_4, epsilon = 1e-14);
        let wv = working_values_probit(&dmatrix![-10.0], &single(1.0));
        assert!(wv.x[(0, 0)].is_finite());
        assert_abs_diff_eq!(wv.x[(0, 0)], 0.098_093_233_962_511_96, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        let rows = vec![vec![Some(1.0), Some(3.2)], vec![Some(0.0), Some(-1.0)]];
        let data =
            BinaryDataMatrix::from_rows(&rows, vec![ColumnKind::Binary, ColumnKind::Continuous]).unwrap();
        let (x, w) = working_values_gaussian(&data, 1, 1.0).unwrap();
        assert_eq!((x[0], w[0]), (3.2, 1.0));
        let (_, w) = working_values_gaussian(&data, 1, 4.0).unwrap();
        assert!(w.iter().all(|&v| v == 0.25));
        assert!(working_values_gaussian(&data, 1, 0.0).is_err());
        assert!(working_values_gaussian(&data, 0, 1.0).is_err());

        let wv = build_working(&DMatrix::zeros(2, 2), &data, Link::Logit, Bound::Uniform, Some(4.0)).unwrap();
        assert!(wv.w.column(0).iter().all(|&v| v == 0.125));
        assert!(wv.w.column(1).iter().all(|&v| v == 0.25));
        assert_eq!(wv.x[(1, 1)], -1.0);
    }

    #[test]
    fn imputation_examples() {
        let theta = dmatrix![0.4, 1.3; -0.2, 0.7];
        let mut x = dmatrix![1.0, 2.0; 3.0, 4.0];
        let before = x.clone();
        impute_missing(&mut x, &theta, &DMatrix::from_element(2, 2, false));
        assert_eq!(x, before);

        impute_missing(&mut x, &theta, &DMatrix::from_element(2, 2, true));
        assert_eq!(x, theta);

        let mut x = before.clone();
        let mut mask = DMatrix::from_element(2, 2, false);
        mask[(0, 1)] = true;
        impute_missing(&mut x, &theta, &mask);
        assert_eq!(x[(0, 1)], 1.3);
        assert_eq!(x[(1, 0)], 3.0);
    }

    #[test]
    fn missing_binary_cells_take_theta_and_rule_weight() {
        let mut mask = DMatrix::from_element(1, 2, false);
        mask[(0, 1)] = true;
        let data = BinaryDataMatrix::from_binary_with_mask(dmatrix![1.0, 0.0], mask).unwrap();
        let theta = dmatrix![0.0, 2.0];
        let wv = build_working(&theta, &data, Link::Logit, Bound::Tight, None).unwrap();
        assert_eq!(wv.x[(0, 1)], 2.0);
        assert_eq!(wv.w[(0, 1)], tight_weight(2.0));
        assert!(wv.x.iter().all(|v| v.is_finite()));
    }
}
