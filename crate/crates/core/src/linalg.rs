//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Thin QR of an `n × k` matrix (`n ≥ k`) with the diagonal of `R` made
/// nonnegative, so the factorization is unique for full-rank input.
pub fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for l in 0..k {
        if r[(l, l)] < 0.0 {
            q.column_mut(l).neg_mut();
            r.row_mut(l).neg_mut();
        }
    }
    (q, r)
}

/// `‖AᵀA − I‖_F`.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let g = a.transpose() * a;
    (g - DMatrix::identity(a.ncols(), a.ncols())).norm()
}

/// Solves the symmetric positive-definite system `M x = rhs` by Cholesky.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let x = chol.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// As [`solve_spd`], retrying once with `ridge·I` added when the plain
/// factorization fails.
pub fn solve_spd_ridged(m: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    solve_spd(m, rhs).or_else(|| {
        let n = m.nrows();
        solve_spd(&(m + DMatrix::identity(n, n) * ridge), rhs)
    })
}

pub fn solve_spd_vec(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = m.clone().cholesky()?;
    let x = chol.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Extends the orthonormal columns of `basis` (n × r) with columns taken from
/// `candidates`, orthogonalizing each against everything accepted so far;
/// candidates that collapse are replaced by canonical basis vectors. Returns
/// `count` new columns.
pub fn complete_orthonormal(
    basis: &DMatrix<f64>,
    candidates: &DMatrix<f64>,
    count: usize,
) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut accepted: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut out = Vec::with_capacity(count);
    let mut fallback = 0usize;
    let mut cand = 0usize;
    while out.len() < count {
        let v = if cand < candidates.ncols() {
            cand += 1;
            candidates.column(cand - 1).into_owned()
        } else {
            let mut e = DVector::zeros(n);
            e[fallback % n] = 1.0;
            fallback += 1;
            if fallback > 2 * n {
                break;
            }
            e
        };
        let mut w = v.clone();
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for u in &accepted {
                let p = u.dot(&w);
                w.axpy(-p, u, 1.0);
            }
        }
        let norm = w.norm();
        if norm > 1e-8 * v.norm().max(1e-300) && norm > 1e-12 {
            let w = w / norm;
            accepted.push(w.clone());
            out.push(w);
        }
    }
    DMatrix::from_columns(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn qr_has_nonnegative_diagonal_and_reconstructs() {
        let m = dmatrix![1.0, 2.0; -3.0, 0.5; 0.2, -1.0; 4.0, 1.0];
        let (q, r) = thin_qr(&m);
        assert_eq!(q.shape(), (4, 2));
        assert!(r[(0, 0)] >= 0.0 && r[(1, 1)] >= 0.0);
        assert_abs_diff_eq!((&q * &r - &m).norm(), 0.0, epsilon = 1e-12);
        assert!(orthonormality_defect(&q) < 1e-14);
    }

    #[test]
    fn completion_is_orthonormal() {
        let basis = dmatrix![1.0; 0.0; 0.0];
        let cands = dmatrix![1.0; 0.0; 0.0]; // collapses, forces fallback
        let extra = complete_orthonormal(&basis, &cands, 2);
        let full = DMatrix::from_columns(&[basis.column(0).into_owned(), extra.column(0).into_owned(), extra.column(1).into_owned()]);
        assert!(orthonormality_defect(&full) < 1e-12);
    }

    #[test]
    fn ridge_fallback_solves_singular_system() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let rhs = dmatrix![1.0; 1.0];
        assert!(solve_spd(&m, &rhs).is_none());
        assert!(solve_spd_ridged(&m, &rhs, 1e-10).is_some());
    }
}
