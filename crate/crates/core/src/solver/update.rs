//! Closed-form block updates of the MM surrogate: intercept, scores, loadings.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlpcaError};
use crate::linalg::{complete_orthonormal, solve_spd_ridged, thin_qr};

use super::working::WorkingValues;

/// Ridge added to a singular normal-equation matrix before giving up.
pub const SCORE_RIDGE: f64 = 1e-10;

/// `X* = X − 1μᵀ`.
pub fn center(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    out
}

/// Column-wise (weighted) mean of `x†_ij = x_ij − a_iᵀb_j`.
pub fn update_intercept(
    wv: &WorkingValues,
    scores: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let fitted = scores * loadings.transpose();
    let (n, d) = wv.x.shape();
    let mut mu = DVector::zeros(d);
    for j in 0..d {
        if wv.column_constant {
            let mut s = 0.0;
            for i in 0..n {
                s += wv.x[(i, j)] - fitted[(i, j)];
            }
            mu[j] = s / n as f64;
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let w = wv.w[(i, j)];
                num += w * (wv.x[(i, j)] - fitted[(i, j)]);
                den += w;
            }
            if !(den > 0.0) {
                return Err(SlpcaError::Numerical(format!(
                    "column {} has zero total weight",
                    j + 1
                )));
            }
            mu[j] = num / den;
        }
    }
    Ok(mu)
}

/// Result of the score step.
#[derive(Debug, Clone)]
pub struct ScoreUpdate {
    /// Orthonormal `Q` that replaces `A`.
    pub scores: DMatrix<f64>,
    /// Compensating factor with `Â = Q R` for the least-squares solution `Â`.
    pub r: DMatrix<f64>,
    /// `B Rᵀ`, so that `Q (B Rᵀ)ᵀ = Â Bᵀ`.
    pub absorbed_loadings: DMatrix<f64>,
}

fn live_columns(loadings: &DMatrix<f64>) -> (Vec<usize>, Vec<usize>) {
    (0..loadings.ncols()).partition(|&l| loadings.column(l).iter().any(|&b| b != 0.0))
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, c| m[(i, cols[c])])
}

/// Row-wise weighted least squares for the scores followed by QR.
///
/// Each row solves `â_i = (BᵀW_iB)⁻¹BᵀW_i x*_i`; the solution is replaced by
/// its orthonormal QR factor. Components whose loading column is identically
/// zero do not enter `Θ`; their score columns are carried over from
/// `prev_scores`, re-orthogonalized against the new ones.
pub fn update_scores(
    wv: &WorkingValues,
    mu: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prev_scores: &DMatrix<f64>,
) -> Result<ScoreUpdate> {
    let (n, d) = wv.x.shape();
    let k = loadings.ncols();
    if loadings.nrows() != d || prev_scores.shape() != (n, k) || mu.len() != d {
        return Err(SlpcaError::dims("score update dimensions disagree".to_string()));
    }
    let (live, dead) = live_columns(loadings);
    if live.is_empty() {
        let (q, _) = thin_qr(prev_scores);
        return Ok(ScoreUpdate {
            scores: q,
            r: DMatrix::identity(k, k),
            absorbed_loadings: loadings.clone(),
        });
    }
    let b_live = select_columns(loadings, &live);
    let xs = center(&wv.x, mu);
    let kl = live.len();

    let a_hat = if wv.column_constant {
        let omega = wv.column_weights();
        let mut wb = b_live.clone();
        for (j, mut row) in wb.row_iter_mut().enumerate() {
            row *= omega[j];
        }
        let gram = b_live.transpose() * &wb;
        let rhs = wb.transpose() * xs.transpose();
        let sol = solve_spd_ridged(&gram, &rhs, SCORE_RIDGE).ok_or_else(|| {
            SlpcaError::DegenerateFactor("loading Gram matrix is singular".into())
        })?;
        sol.transpose()
    } else {
        let mut a_hat = DMatrix::zeros(n, kl);
        let mut gram = DMatrix::zeros(kl, kl);
        let mut rhs = DMatrix::zeros(kl, 1);
        for i in 0..n {
            gram.fill(0.0);
            rhs.fill(0.0);
            for j in 0..d {
                let w = wv.w[(i, j)];
                let bj = b_live.row(j);
                for p in 0..kl {
                    let wbp = w * bj[p];
                    rhs[(p, 0)] += wbp * xs[(i, j)];
                    for q in p..kl {
                        gram[(p, q)] += wbp * bj[q];
                    }
                }
            }
            for p in 0..kl {
                for q in 0..p {
                    gram[(p, q)] = gram[(q, p)];
                }
            }
            let sol = solve_spd_ridged(&gram, &rhs, SCORE_RIDGE).ok_or_else(|| {
                SlpcaError::DegenerateFactor(format!("weighted Gram matrix of row {} is singular", i + 1))
            })?;
            a_hat.row_mut(i).copy_from(&sol.transpose());
        }
        a_hat
    };

    if n < kl {
        return Err(SlpcaError::DegenerateFactor(format!("rank {kl} exceeds {n} rows")));
    }
    let (q_live, r_live) = thin_qr(&a_hat);
    let rmax = (0..kl).map(|l| r_live[(l, l)]).fold(0.0, f64::max);
    if !(rmax > 0.0) || (0..kl).any(|l| r_live[(l, l)] <= 1e-12 * rmax) {
        return Err(SlpcaError::DegenerateFactor(
            "score matrix lost rank during orthonormalization".into(),
        ));
    }

    let mut q = DMatrix::zeros(n, k);
    let mut r = DMatrix::zeros(k, k);
    for (c, &l) in live.iter().enumerate() {
        q.set_column(l, &q_live.column(c));
        for (c2, &l2) in live.iter().enumerate() {
            r[(l, l2)] = r_live[(c, c2)];
        }
    }
    if !dead.is_empty() {
        let extra = complete_orthonormal(&q_live, &select_columns(prev_scores, &dead), dead.len());
        if extra.ncols() < dead.len() {
            return Err(SlpcaError::DegenerateFactor("cannot complete orthonormal scores".into()));
        }
        for (c, &l) in dead.iter().enumerate() {
            q.set_column(l, &extra.column(c));
            r[(l, l)] = 1.0;
        }
    }
    let absorbed_loadings = loadings * r.transpose();
    Ok(ScoreUpdate {
        scores: q,
        r,
        absorbed_loadings,
    })
}

/// Loading step: minimizes the surrogate over `B` given orthonormal scores,
/// with the L1 penalty replaced by its quadratic bound at `anchor`.
///
/// With column-constant weights this is component-wise shrinkage
/// `b̂_jl = |b⁰_jl| c_jl / (|b⁰_jl| + nλ_l/(2w_j))`, `C = X*ᵀA`; for the uniform
/// logistic weight `1/8` the denominator is `|b⁰_jl| + 4nλ_l`. Otherwise each
/// row solves the k×k system `(AᵀW_jA + nD_j) b_j = AᵀW_j x*_j` with
/// `D_j = diag(λ_l / (2|b⁰_jl|))`.
///
/// Anchor entries below `zero_eps` in magnitude give an exact zero, and so do
/// updated values that fall below it.
pub fn update_loadings(
    wv: &WorkingValues,
    mu: &DVector<f64>,
    scores: &DMatrix<f64>,
    anchor: &DMatrix<f64>,
    lambda: &[f64],
    n_rows: usize,
    zero_eps: f64,
) -> DMatrix<f64> {
    let xs = center(&wv.x, mu);
    let (n, d) = xs.shape();
    let k = scores.ncols();
    let nf = n_rows as f64;
    let mut out = DMatrix::zeros(d, k);

    if wv.column_constant {
        let c = xs.transpose() * scores;
        let omega = wv.column_weights();
        for l in 0..k {
            for j in 0..d {
                let b0 = anchor[(j, l)].abs();
                if b0 < zero_eps {
                    continue;
                }
                let shrink = if lambda[l] == 0.0 {
                    1.0
                } else {
                    b0 / (b0 + nf * lambda[l] / (2.0 * omega[j]))
                };
                let v = shrink * c[(j, l)];
                out[(j, l)] = if v.abs() < zero_eps { 0.0 } else { v };
            }
        }
        return out;
    }

    // Per-cell weights. Live coordinates are rescaled by s_l = sqrt|b⁰_jl| so
    // that the system stays well conditioned as anchors approach zero:
    // (S AᵀW_jA S + n·diag(λ/2)) u = S AᵀW_j x*_j,  b = S u.
    for j in 0..d {
        let live: Vec<usize> = (0..k).filter(|&l| anchor[(j, l)].abs() >= zero_eps).collect();
        if live.is_empty() {
            continue;
        }
        let kl = live.len();
        let s: Vec<f64> = live.iter().map(|&l| anchor[(j, l)].abs().sqrt()).collect();
        let mut m = DMatrix::zeros(kl, kl);
        let mut rhs = DVector::zeros(kl);
        for i in 0..n {
            let w = wv.w[(i, j)];
            let xv = xs[(i, j)];
            for p in 0..kl {
                let ap = scores[(i, live[p])] * s[p];
                rhs[p] += w * ap * xv;
                for q in p..kl {
                    m[(p, q)] += w * ap * scores[(i, live[q])] * s[q];
                }
            }
        }
        for p in 0..kl {
            for q in 0..p {
                m[(p, q)] = m[(q, p)];
            }
            m[(p, p)] += nf * lambda[live[p]] / 2.0;
        }
        let rhs_m = DMatrix::from_column_slice(kl, 1, rhs.as_slice());
        if let Some(u) = solve_spd_ridged(&m, &rhs_m, SCORE_RIDGE) {
            for p in 0..kl {
                let v = s[p] * u[(p, 0)];
                out[(j, live[p])] = if v.abs() < zero_eps { 0.0 } else { v };
            }
        }
    }
    out
}

/// Score step restricted to orthonormal matrices.
///
/// With column weights `ω` and `AᵀA = I` the surrogate reduces, up to
/// constants, to `−2 tr(Aᵀ X* Ω B)`, maximized by the polar factor `U Vᵀ` of
/// `X* Ω B`. Per-cell weights are first majorized by their column maximum
/// `c_j`, with target `y* = θ* + (w/c_j)(x* − θ*)` built at the current
/// `θ* = A Bᵀ`, so the step never increases the surrogate.
pub fn procrustes_scores(
    wv: &WorkingValues,
    mu: &DVector<f64>,
    scores: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (live, dead) = live_columns(loadings);
    if live.is_empty() {
        return Ok(scores.clone());
    }
    let b_live = select_columns(loadings, &live);
    let mut target = center(&wv.x, mu);
    let (n, d) = target.shape();
    let omega: DVector<f64> = if wv.column_constant {
        wv.column_weights()
    } else {
        let fitted = scores * loadings.transpose();
        let mut omega = DVector::zeros(d);
        for j in 0..d {
            let c = wv.w.column(j).max();
            omega[j] = c;
            if c > 0.0 {
                for i in 0..n {
                    let t0 = fitted[(i, j)];
                    target[(i, j)] = t0 + wv.w[(i, j)] / c * (target[(i, j)] - t0);
                }
            }
        }
        omega
    };
    let mut wb = b_live.clone();
    for (j, mut row) in wb.row_iter_mut().enumerate() {
        row *= omega[j];
    }
    let m = target * wb;
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(SlpcaError::Numerical("SVD failed in the score step".into()));
    };
    let a_live = u * v_t;
    let mut out = DMatrix::zeros(n, loadings.ncols());
    for (c, &l) in live.iter().enumerate() {
        out.set_column(l, &a_live.column(c));
    }
    if !dead.is_empty() {
        let extra = complete_orthonormal(&a_live, &select_columns(scores, &dead), dead.len());
        if extra.ncols() < dead.len() {
            return Err(SlpcaError::DegenerateFactor("cannot complete orthonormal scores".into()));
        }
        for (c, &l) in dead.iter().enumerate() {
            out.set_column(l, &extra.column(c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn uniform(x: DMatrix<f64>) -> WorkingValues {
        let w = DMatrix::from_element(x.nrows(), x.ncols(), 0.125);
        WorkingValues {
            x,
            w,
            column_constant: true,
        }
    }

    #[test]
    fn intercept_examples() {
        let wv = uniform(DMatrix::from_element(3, 2, 1.7));
        let mu = update_intercept(&wv, &DMatrix::zeros(3, 1), &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(mu, dvector![1.7, 1.7]);

        let wv = uniform(dmatrix![1.0; 3.0]);
        let mu = update_intercept(&wv, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(mu[0], 2.0);

        let wv = WorkingValues {
            x: dmatrix![1.0; 3.0],
            w: dmatrix![1.0; 3.0],
            column_constant: false,
        };
        let mu = update_intercept(&wv, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert_abs_diff_eq!(mu[0], 2.5, epsilon = 1e-15);

        let wv = WorkingValues {
            x: dmatrix![1.0; 3.0],
            w: dmatrix![0.0; 0.0],
            column_constant: false,
        };
        assert!(update_intercept(&wv, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn single_column_projection() {
        let x = dmatrix![1.0, 5.0; -2.0, 0.0; 3.0, 1.0];
        let wv = uniform(x.clone());
        let b = dmatrix![1.0; 0.0];
        let up = update_scores(&wv, &DVector::zeros(2), &b, &DMatrix::zeros(3, 1)).unwrap();
        let col = x.column(0).normalize();
        assert_abs_diff_eq!((up.scores.column(0) - col).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(up.scores.column(0).norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn absorption_preserves_product() {
        let x = dmatrix![1.0, 5.0, 0.3; -2.0, 0.0, 1.1; 3.0, 1.0, -0.4; 0.5, -1.5, 2.0];
        let wv = uniform(x);
        let b = dmatrix![1.0, 0.2; 0.4, -0.7; 0.0, 1.3];
        let mu = dvector![0.1, -0.2, 0.3];
        let up = update_scores(&wv, &mu, &b, &DMatrix::zeros(4, 2)).unwrap();
        let a_hat = &up.scores * &up.r;
        let before = &a_hat * b.transpose();
        let after = &up.scores * up.absorbed_loadings.transpose();
        assert!((before - after).norm() < 1e-12);
        assert!(orthonormality_defect(&up.scores) < 1e-12);
    }

    #[test]
    fn dead_components_keep_orthonormal_scores() {
        let x = dmatrix![1.0, 5.0; -2.0, 0.0; 3.0, 1.0; 0.5, 0.5];
        let wv = uniform(x);
        let b = dmatrix![0.0, 0.7; 0.0, -0.2];
        let prev = crate::linalg::thin_qr(&dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0; 0.0, 2.0]).0;
        let up = update_scores(&wv, &DVector::zeros(2), &b, &prev).unwrap();
        assert!(orthonormality_defect(&up.scores) < 1e-12);
    }

    #[test]
    fn shrinkage_examples() {
        // n = 10, one row (d = 1), one component; X*ᵀA = c = 2 with A = e_1
        let n = 10;
        let mut x = DMatrix::zeros(n, 1);
        x[(0, 0)] = 2.0;
        let wv = uniform(x);
        let mut a = DMatrix::zeros(n, 1);
        a[(0, 0)] = 1.0;
        let mu = DVector::zeros(1);

        let b = update_loadings(&wv, &mu, &a, &dmatrix![1.0], &[0.05], n, 1e-10);
        assert_abs_diff_eq!(b[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);

        let b = update_loadings(&wv, &mu, &a, &dmatrix![0.3], &[0.0], n, 1e-10);
        assert_eq!(b[(0, 0)], 2.0);

        let b = update_loadings(&wv, &mu, &a, &dmatrix![0.0], &[0.0], n, 1e-10);
        assert_eq!(b[(0, 0)], 0.0);
        let b = update_loadings(&wv, &mu, &a, &dmatrix![5e-11], &[0.01], n, 1e-10);
        assert_eq!(b[(0, 0)], 0.0);
    }

    #[test]
    fn probit_weight_shrinkage_denominator() {
        let n = 10;
        let mut x = DMatrix::zeros(n, 1);
        x[(0, 0)] = 2.0;
        let wv = WorkingValues {
            w: DMatrix::from_element(n, 1, 0.5),
            x,
            column_constant: true,
        };
        let mut a = DMatrix::zeros(n, 1);
        a[(0, 0)] = 1.0;
        // denominator |b| + nλ = 1 + 0.5
        let b = update_loadings(&wv, &DVector::zeros(1), &a, &dmatrix![1.0], &[0.05], n, 1e-10);
        assert_abs_diff_eq!(b[(0, 0)], 2.0 / 1.5, epsilon = 1e-15);
    }

    #[test]
    fn weighted_path_matches_closed_form_for_constant_weights() {
        let x = dmatrix![1.0, 5.0, 0.3; -2.0, 0.0, 1.1; 3.0, 1.0, -0.4; 0.5, -1.5, 2.0];
        let a = crate::linalg::thin_qr(&dmatrix![1.0, 0.0; 0.3, 1.0; -1.0, 0.5; 0.2, 0.2]).0;
        let anchor = dmatrix![1.0, 0.2; 0.4, -0.7; 0.0, 1.3];
        let mu = dvector![0.1, -0.2, 0.3];
        let closed = update_loadings(&uniform(x.clone()), &mu, &a, &anchor, &[0.05, 0.1], 4, 1e-10);
        let general = WorkingValues {
            w: DMatrix::from_element(4, 3, 0.125),
            x,
            column_constant: false,
        };
        let solved = update_loadings(&general, &mu, &a, &anchor, &[0.05, 0.1], 4, 1e-10);
        assert!((closed - solved).norm() < 1e-12);
    }
}
