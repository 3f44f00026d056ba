//! The quadratic surrogate `g(· | m)` and its tangency constant.
//!
//! `g = Σ_ij w_ij (x_ij − θ_ij)² + n Σ_jl λ_l b_jl² / (2|b⁰_jl|)`. Adding the
//! constant from [`surrogate_offset`] makes `g` touch the penalized objective
//! at the anchor iterate and lie above it elsewhere.

use nalgebra::DMatrix;

use crate::data::{BinaryDataMatrix, ColumnKind};
use crate::link::{inverse_mills_ratio, logistic, Link};
use crate::model::{log_likelihood_theta, penalty_unchecked, CompensatedSum};

use super::working::{tight_weight, WorkingValues};
use super::Bound;

/// Quadratic penalty bound `n Σ λ_l b²/(2|b⁰|)`; infinite if a loading is
/// nonzero where its anchor is zero.
pub fn penalty_surrogate(loadings: &DMatrix<f64>, anchor: &DMatrix<f64>, lambda: &[f64], n: usize) -> f64 {
    let mut acc = CompensatedSum::default();
    for l in 0..loadings.ncols() {
        if lambda[l] == 0.0 {
            continue;
        }
        for j in 0..loadings.nrows() {
            let b = loadings[(j, l)];
            if b == 0.0 {
                continue;
            }
            let b0 = anchor[(j, l)].abs();
            if b0 == 0.0 {
                return f64::INFINITY;
            }
            acc.add(lambda[l] * b * b / (2.0 * b0));
        }
    }
    n as f64 * acc.value()
}

/// `Σ w (x − θ)²` over every cell, missing ones included.
pub fn quadratic_part(wv: &WorkingValues, theta: &DMatrix<f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for ((&x, &w), &t) in wv.x.iter().zip(wv.w.iter()).zip(theta.iter()) {
        let r = x - t;
        acc.add(w * r * r);
    }
    acc.value()
}

/// Surrogate value at `(θ, B)` given working values and penalty anchor.
pub fn surrogate_value(
    wv: &WorkingValues,
    theta: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    anchor: &DMatrix<f64>,
    lambda: &[f64],
    n: usize,
) -> f64 {
    quadratic_part(wv, theta) + penalty_surrogate(loadings, anchor, lambda, n)
}

/// Closed-form value of `w (x − θ)²` at the anchor for one observed binary cell.
#[inline]
fn binary_tangent_constant(link: Link, bound: Bound, q: f64, theta: f64) -> f64 {
    match (link, bound) {
        (Link::Probit, _) => {
            let m = inverse_mills_ratio(q * theta);
            0.5 * m * m
        }
        (Link::Logit, Bound::Uniform) => {
            let r = 1.0 - logistic(q * theta);
            2.0 * r * r
        }
        (Link::Logit, Bound::Tight) => {
            let r = 1.0 - logistic(q * theta);
            r * r / (4.0 * tight_weight(theta))
        }
    }
}

/// `C_m` such that `g(m | m) + C_m = S(m)`:
/// `C_m = −ℓ(Θ_m) − Σ_cells w(x − θ_m)² + (n/2) P_λ(B_m)`, with the middle sum
/// in closed form (zero on missing cells, where `x = θ_m`).
#[allow(clippy::too_many_arguments)]
pub fn surrogate_offset(
    data: &BinaryDataMatrix,
    theta_m: &DMatrix<f64>,
    link: Link,
    bound: Bound,
    sigma2: Option<f64>,
    anchor: &DMatrix<f64>,
    lambda: &[f64],
    prob_clamp: f64,
) -> f64 {
    let (n, d) = data.shape();
    let mut consts = CompensatedSum::default();
    for j in 0..d {
        for i in 0..n {
            let Some(y) = data.get(i, j) else { continue };
            let t = theta_m[(i, j)];
            consts.add(match data.kind(j) {
                ColumnKind::Binary => binary_tangent_constant(link, bound, data.sign(i, j), t),
                ColumnKind::Continuous => {
                    let r = y - t;
                    r * r / sigma2.expect("continuous data carries sigma2")
                }
            });
        }
    }
    let ll = log_likelihood_theta(data, theta_m, link, sigma2, prob_clamp);
    -ll - consts.value() + 0.5 * n as f64 * penalty_unchecked(anchor, lambda)
}
