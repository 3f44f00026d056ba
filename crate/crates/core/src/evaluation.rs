//! Metrics and diagnostics: principal angles, false positives, Pearson
//! residuals, a parametric bootstrap envelope and the one-way F test.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::{BinaryDataMatrix, ColumnKind};
use crate::error::{Result, SlpcaError};
use crate::linalg::thin_qr;
use crate::model::{canonical_matrix, probabilities, SlpcaModel, DEFAULT_PROB_CLAMP};
use crate::solver::{fit, fit_from, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SubspaceAngle {
    pub degrees: f64,
}

fn orthonormal_basis(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (d, k) = m.shape();
    if k == 0 || d < k {
        return Err(SlpcaError::invalid(format!("{what} must have 1..={d} columns, got {k}")));
    }
    let (q, r) = thin_qr(m);
    let rmax = (0..k).map(|l| r[(l, l)]).fold(0.0, f64::max);
    if !(rmax > 0.0) || (0..k).any(|l| r[(l, l)] <= 1e-10 * rmax) {
        return Err(SlpcaError::invalid(format!("{what} is rank deficient")));
    }
    Ok(q)
}

/// Largest principal angle between `span(b_hat)` and `span(b_true)`:
/// `acos(ρ)` in degrees with `ρ` the smallest singular value of `Q̂ᵀQ`.
pub fn principal_angle(b_hat: &DMatrix<f64>, b_true: &DMatrix<f64>) -> Result<SubspaceAngle> {
    if b_hat.nrows() != b_true.nrows() {
        return Err(SlpcaError::dims(format!(
            "loading matrices have {} and {} rows",
            b_hat.nrows(),
            b_true.nrows()
        )));
    }
    let q1 = orthonormal_basis(b_hat, "estimated loadings")?;
    let q2 = orthonormal_basis(b_true, "reference loadings")?;
    let sv = (q1.transpose() * q2).singular_values();
    let rho = sv.iter().copied().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    Ok(SubspaceAngle {
        degrees: rho.acos().to_degrees(),
    })
}

/// Columns of `b` that are not identically zero.
pub fn drop_zero_columns(b: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<_> = b
        .column_iter()
        .filter(|c| c.iter().any(|&v| v != 0.0))
        .map(|c| c.into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(b.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Denominator of the false-positive percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpDenominator {
    /// Share of the selected loadings that are wrong.
    #[default]
    EstimatedNonzeros,
    /// Share of the true zeros that were selected.
    TrueZeros,
}

fn fp_ratio(false_pos: usize, denom: usize) -> Result<f64> {
    if denom == 0 {
        return Err(SlpcaError::invalid("false-positive rate has an empty denominator"));
    }
    Ok(100.0 * false_pos as f64 / denom as f64)
}

/// Cell-level false-positive percentage of the nonzero pattern of `b_hat`
/// against the `(row, component)` pairs in `true_support`.
pub fn false_positive_rate(
    b_hat: &DMatrix<f64>,
    true_support: &HashSet<(usize, usize)>,
    denominator: FpDenominator,
) -> Result<f64> {
    let (d, k) = b_hat.shape();
    let mut nonzero = 0;
    let mut false_pos = 0;
    for l in 0..k {
        for j in 0..d {
            if b_hat[(j, l)] != 0.0 {
                nonzero += 1;
                if !true_support.contains(&(j, l)) {
                    false_pos += 1;
                }
            }
        }
    }
    if nonzero == 0 {
        return Err(SlpcaError::invalid("estimated loadings are all zero"));
    }
    let denom = match denominator {
        FpDenominator::EstimatedNonzeros => nonzero,
        FpDenominator::TrueZeros => {
            let true_in_shape = true_support.iter().filter(|&&(j, l)| j < d && l < k).count();
            d * k - true_in_shape
        }
    };
    fp_ratio(false_pos, denom)
}

/// Variable-level false positives: a variable is selected when any of its
/// loadings is nonzero. Unlike the cell-level rate this does not depend on
/// how the fitted components are rotated or how many there are.
pub fn variable_false_positive_rate(
    b_hat: &DMatrix<f64>,
    true_variables: &HashSet<usize>,
    denominator: FpDenominator,
) -> Result<f64> {
    let d = b_hat.nrows();
    let selected: Vec<usize> = (0..d).filter(|&j| b_hat.row(j).iter().any(|&v| v != 0.0)).collect();
    if selected.is_empty() {
        return Err(SlpcaError::invalid("estimated loadings are all zero"));
    }
    let false_pos = selected.iter().filter(|j| !true_variables.contains(j)).count();
    let denom = match denominator {
        FpDenominator::EstimatedNonzeros => selected.len(),
        FpDenominator::TrueZeros => d - true_variables.iter().filter(|&&j| j < d).count(),
    };
    fp_ratio(false_pos, denom)
}

/// `(y − π̂)/sqrt(π̂(1 − π̂))` on observed binary cells; NaN elsewhere.
pub fn pearson_residuals(data: &BinaryDataMatrix, model: &SlpcaModel) -> Result<DMatrix<f64>> {
    if data.shape() != (model.nrows(), model.ncols()) {
        return Err(SlpcaError::dims("model and data shapes differ"));
    }
    let p = probabilities(model);
    let (n, d) = data.shape();
    Ok(DMatrix::from_fn(n, d, |i, j| match (data.kind(j), data.get(i, j)) {
        (ColumnKind::Binary, Some(y)) => {
            let pi = p[(i, j)].clamp(DEFAULT_PROB_CLAMP, 1.0 - DEFAULT_PROB_CLAMP);
            (y - pi) / (pi * (1.0 - pi)).sqrt()
        }
        _ => f64::NAN,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelations {
    /// One list per group, pairs `(a, b)` with `a < b` in column order.
    pub groups: Vec<Vec<f64>>,
    /// Pairs dropped because a column had zero variance on the shared rows.
    pub skipped: usize,
}

impl PairCorrelations {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().flatten().copied()
    }
}

fn pairwise_correlation(x: &DMatrix<f64>, a: usize, b: usize) -> Option<f64> {
    let rows: Vec<(f64, f64)> = (0..x.nrows())
        .map(|i| (x[(i, a)], x[(i, b)]))
        .filter(|(u, v)| u.is_finite() && v.is_finite())
        .collect();
    if rows.len() < 2 {
        return None;
    }
    let m = rows.len() as f64;
    let (mu, mv) = rows.iter().fold((0.0, 0.0), |(s, t), (u, v)| (s + u, t + v));
    let (mu, mv) = (mu / m, mv / m);
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for (u, v) in &rows {
        suu += (u - mu) * (u - mu);
        svv += (v - mv) * (v - mv);
        suv += (u - mu) * (v - mv);
    }
    if suu <= 0.0 || svv <= 0.0 {
        return None;
    }
    Some((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlations of residual columns for every within-group pair,
/// over the rows where both cells are present.
pub fn residual_pairwise_correlations(
    residuals: &DMatrix<f64>,
    groups: &[Vec<usize>],
) -> Result<PairCorrelations> {
    let d = residuals.ncols();
    let mut out = Vec::with_capacity(groups.len());
    let mut skipped = 0;
    for (g, cols) in groups.iter().enumerate() {
        if cols.len() < 2 {
            return Err(SlpcaError::invalid(format!("group {} has fewer than two columns", g + 1)));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= d) {
            return Err(SlpcaError::invalid(format!("group {} names column {} of {d}", g + 1, c + 1)));
        }
        let mut list = Vec::new();
        for (x, &a) in cols.iter().enumerate() {
            for &b in &cols[x + 1..] {
                match pairwise_correlation(residuals, a, b) {
                    Some(r) => list.push(r),
                    None => skipped += 1,
                }
            }
        }
        out.push(list);
    }
    Ok(PairCorrelations { groups: out, skipped })
}

/// Per-cell 5% and 95% bootstrap quantiles of the fitted probabilities,
/// listed in ascending order of the point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEnvelope {
    /// `(row, column)` of each entry.
    pub cells: Vec<(usize, usize)>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub successes: usize,
    pub failures: usize,
}

impl BootstrapEnvelope {
    pub fn mean_width(&self) -> f64 {
        let s: f64 = self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum();
        s / self.point.len().max(1) as f64
    }

    /// Fraction of cells whose point estimate lies inside its envelope.
    pub fn coverage(&self) -> f64 {
        let inside = (0..self.point.len())
            .filter(|&c| self.lower[c] <= self.point[c] && self.point[c] <= self.upper[c])
            .count();
        inside as f64 / self.point.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    /// Refit each replicate from the original estimate instead of a random start.
    pub warm_start: bool,
    /// Draw every replicate from the same random stream. Only useful as a
    /// determinism check: all replicates then coincide.
    pub shared_stream: bool,
}

impl BootstrapConfig {
    pub fn new(n_boot: usize, seed: u64) -> Self {
        BootstrapConfig {
            n_boot,
            seed,
            warm_start: true,
            shared_stream: false,
        }
    }
}

/// Minimum share of successful refits for an envelope to be reported.
pub const BOOTSTRAP_MIN_SUCCESS: f64 = 0.8;

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resample(data: &BinaryDataMatrix, model: &SlpcaModel, rng: &mut ChaCha8Rng) -> Result<BinaryDataMatrix> {
    let theta = canonical_matrix(model);
    let link = model.link();
    let (n, d) = data.shape();
    let noise = match model.sigma2() {
        Some(s2) => Some(Normal::new(0.0, s2.sqrt()).map_err(|e| SlpcaError::invalid(e.to_string()))?),
        None => None,
    };
    let mut values = DMatrix::zeros(n, d);
    for j in 0..d {
        for i in 0..n {
            let t = theta[(i, j)];
            values[(i, j)] = match data.kind(j) {
                ColumnKind::Binary => {
                    if rng.random::<f64>() < link.inverse(t) {
                        1.0
                    } else {
                        0.0
                    }
                }
                ColumnKind::Continuous => t + noise.as_ref().expect("continuous data has sigma2").sample(rng),
            };
        }
    }
    BinaryDataMatrix::new(values, data.missing_mask().clone(), data.kinds().to_vec())
}

/// Parametric bootstrap: resamples every cell from the fitted model (missing
/// cells stay missing), refits with `fit_cfg`, and summarizes the refitted
/// probabilities of binary cells.
pub fn bootstrap_envelope(
    data: &BinaryDataMatrix,
    model: &SlpcaModel,
    fit_cfg: &FitConfig,
    cfg: &BootstrapConfig,
) -> Result<BootstrapEnvelope> {
    if cfg.n_boot < 2 {
        return Err(SlpcaError::config("n_boot must be at least 2"));
    }
    if data.shape() != (model.nrows(), model.ncols()) {
        return Err(SlpcaError::dims("model and data shapes differ"));
    }
    let replicates: Vec<Result<DMatrix<f64>>> = (0..cfg.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            if !cfg.shared_stream {
                rng.set_stream(b as u64);
            }
            let boot = resample(data, model, &mut rng)?;
            let res = if cfg.warm_start {
                fit_from(&boot, fit_cfg, model)?
            } else {
                fit(&boot, &FitConfig {
                    seed: fit_cfg.seed.wrapping_add(b as u64),
                    ..fit_cfg.clone()
                })?
            };
            Ok(probabilities(&res.model))
        })
        .collect();
    let mut ok = Vec::with_capacity(cfg.n_boot);
    let mut failures = 0;
    for r in replicates {
        match r {
            Ok(p) => ok.push(p),
            Err(e) if e.is_numerical() => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let required = (BOOTSTRAP_MIN_SUCCESS * cfg.n_boot as f64).ceil() as usize;
    if ok.len() < required {
        return Err(SlpcaError::TooManyFailures {
            failed: failures,
            attempted: cfg.n_boot,
            required,
        });
    }

    let p_hat = probabilities(model);
    let (n, d) = data.shape();
    let mut cells: Vec<(usize, usize)> = (0..d)
        .filter(|&j| data.kind(j) == ColumnKind::Binary)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .collect();
    cells.sort_by(|a, b| p_hat[*a].total_cmp(&p_hat[*b]));
    let mut lower = Vec::with_capacity(cells.len());
    let mut upper = Vec::with_capacity(cells.len());
    let mut draws = vec![0.0; ok.len()];
    for &c in &cells {
        for (slot, p) in draws.iter_mut().zip(&ok) {
            *slot = p[c];
        }
        draws.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&draws, 0.05));
        upper.push(quantile_sorted(&draws, 0.95));
    }
    Ok(BootstrapEnvelope {
        point: cells.iter().map(|&c| p_hat[c]).collect(),
        cells,
        lower,
        upper,
        successes: ok.len(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA of `scores` on the group `labels`, with an upper-tail
/// p-value from the F(g − 1, n − g) distribution. When every score is equal
/// the result is `F = 0, p = 1`.
pub fn group_f_test<L: Ord>(scores: &[f64], labels: &[L]) -> Result<FTest> {
    if scores.len() != labels.len() {
        return Err(SlpcaError::dims(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<&L, Vec<f64>> = BTreeMap::new();
    for (s, l) in scores.iter().zip(labels) {
        groups.entry(l).or_default().push(*s);
    }
    let g = groups.len();
    let n = scores.len();
    if g < 2 {
        return Err(SlpcaError::invalid("F test needs at least two groups"));
    }
    if n <= g {
        return Err(SlpcaError::invalid("F test needs more observations than groups"));
    }
    let grand = scores.iter().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for vals in groups.values() {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        ssb += vals.len() as f64 * (m - grand) * (m - grand);
        ssw += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let (df1, df2) = (g - 1, n - g);
    let scale = scores.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if ssb <= 1e-14 * scale {
        return Ok(FTest {
            f: 0.0,
            p_value: 1.0,
            df_between: df1,
            df_within: df2,
        });
    }
    if ssw <= 0.0 {
        return Ok(FTest {
            f: f64::INFINITY,
            p_value: 0.0,
            df_between: df1,
            df_within: df2,
        });
    }
    let f = (ssb / df1 as f64) / (ssw / df2 as f64);
    let dist = FisherSnedecor::new(df1 as f64, df2 as f64).map_err(|e| SlpcaError::Numerical(e.to_string()))?;
    Ok(FTest {
        f,
        p_value: dist.sf(f),
        df_between: df1,
        df_within: df2,
    })
}

/// Share of label permutations whose F statistic reaches the observed one,
/// counting the observed labelling itself.
pub fn permutation_f_test<L: Ord + Clone>(scores: &[f64], labels: &[L], n_perm: usize, seed: u64) -> Result<f64> {
    let observed = group_f_test(scores, labels)?.f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut hits = 1usize;
    for _ in 0..n_perm {
        perm.shuffle(&mut rng);
        if group_f_test(scores, &perm)?.f >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / (n_perm + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn angle_examples() {
        let e1 = dmatrix![1.0; 0.0];
        let e2 = dmatrix![0.0; 1.0];
        assert_abs_diff_eq!(principal_angle(&e1, &e1).unwrap().degrees, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(principal_angle(&e1, &e2).unwrap().degrees, 90.0, epsilon = 1e-12);
        let diag = dmatrix![1.0; 1.0] / 2f64.sqrt();
        assert_abs_diff_eq!(principal_angle(&diag, &e1).unwrap().degrees, 45.0, epsilon = 1e-10);
        assert!(principal_angle(&dmatrix![0.0; 0.0], &e1).is_err());
        assert!(principal_angle(&dmatrix![1.0, 2.0; 1.0, 2.0; 0.0, 0.0], &dmatrix![1.0; 0.0; 0.0]).is_err());
    }

    #[test]
    fn wider_estimate_contains_truth() {
        let b_hat = dmatrix![1.0, 0.0, 0.3; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 0.0, 0.0, 0.0];
        let truth = dmatrix![2.0; 1.0; 0.0; 0.0];
        assert_abs_diff_eq!(principal_angle(&b_hat, &truth).unwrap().degrees, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn false_positive_examples() {
        let support: HashSet<_> = [(0, 0), (1, 0)].into_iter().collect();
        let exact = dmatrix![1.0; 2.0; 0.0; 0.0];
        assert_eq!(false_positive_rate(&exact, &support, FpDenominator::EstimatedNonzeros).unwrap(), 0.0);
        let disjoint = dmatrix![0.0; 0.0; 1.0; 0.0];
        assert_eq!(false_positive_rate(&disjoint, &support, FpDenominator::EstimatedNonzeros).unwrap(), 100.0);
        let half = dmatrix![1.0; 0.0; 1.0; 0.0];
        assert_eq!(false_positive_rate(&half, &support, FpDenominator::EstimatedNonzeros).unwrap(), 50.0);
        assert_eq!(false_positive_rate(&half, &support, FpDenominator::TrueZeros).unwrap(), 50.0);
        assert!(false_positive_rate(&dmatrix![0.0; 0.0], &support, FpDenominator::EstimatedNonzeros).is_err());

        let vars: HashSet<_> = [0usize, 1].into_iter().collect();
        let rotated = dmatrix![0.5, 0.7; 0.0, 0.1; 0.0, 0.0; 0.2, 0.0];
        assert_abs_diff_eq!(
            variable_false_positive_rate(&rotated, &vars, FpDenominator::EstimatedNonzeros).unwrap(),
            100.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pearson_examples() {
        let data = BinaryDataMatrix::from_binary(dmatrix![1.0, 0.0, 1.0]).unwrap();
        let lo = (0.8f64 / 0.2).ln();
        let model = SlpcaModel::new(
            nalgebra::dvector![0.0, 0.0, lo],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(3, 1),
            crate::link::Link::Logit,
            vec![0.0],
            None,
        )
        .unwrap();
        let r = pearson_residuals(&data, &model).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 1)], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 2)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let x = dmatrix![1.0, 1.0, 3.0, 5.0; 2.0, 2.0, 1.0, 5.0; 4.0, 4.0, 2.0, 5.0; f64::NAN, 0.0, 1.0, 5.0];
        let out = residual_pairwise_correlations(&x, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_abs_diff_eq!(out.groups[0][0], 1.0, epsilon = 1e-15);
        assert!(out.groups[1].is_empty());
        assert_eq!(out.skipped, 1);
        assert!(residual_pairwise_correlations(&x, &[vec![0]]).is_err());
    }

    #[test]
    fn anova_examples() {
        let s = [1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0];
        let l = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let t = group_f_test(&s, &l).unwrap();
        assert_abs_diff_eq!(t.f, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.p_value, 0.125, epsilon = 1e-10);
        assert_eq!((t.df_between, t.df_within), (2, 6));

        let t = group_f_test(&[2.0; 6], &[0, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!((t.f, t.p_value), (0.0, 1.0));
        assert!(group_f_test(&[1.0, 2.0], &[0, 0]).is_err());
    }

    #[test]
    fn quantiles_type_seven() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.05), 1.2);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.95), 4.8, epsilon = 1e-12);
        assert_eq!(quantile_sorted(&[7.0], 0.5), 7.0);
    }
}
