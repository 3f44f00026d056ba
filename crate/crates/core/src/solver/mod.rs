//! Majorization-minimization fitting of the sparse logistic PCA model.
//!
//! Each cycle builds working values at the current `Θ`, then updates the
//! intercept, the scores and the loadings in closed form. Every block step
//! lowers the quadratic surrogate, which touches the penalized objective at
//! the start of the cycle, so the objective trace is nonincreasing.

pub mod surrogate;
pub mod update;
pub mod working;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erfc_inv;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryDataMatrix, ColumnKind};
use crate::error::{Result, SlpcaError};
use crate::linalg::thin_qr;
use crate::link::Link;
use crate::model::{
    log_likelihood_theta, penalty_unchecked, SlpcaModel, DEFAULT_PROB_CLAMP,
};

use surrogate::{penalty_surrogate, quadratic_part};
use update::{procrustes_scores, update_intercept, update_loadings, update_scores};
use working::build_working;

/// Quadratic bound used for the logistic log-likelihood. Ignored under the
/// probit link, whose bound has the single curvature `1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    #[default]
    Uniform,
    Tight,
}

impl std::str::FromStr for Bound {
    type Err = SlpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Bound::Uniform),
            "tight" => Ok(Bound::Tight),
            other => Err(SlpcaError::config(format!("unknown bound '{other}'"))),
        }
    }
}

/// How the score block is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreStep {
    /// Least squares followed by QR; if the resulting cycle would raise the
    /// surrogate (possible when λ > 0, since the QR factor also rotates the
    /// loadings the penalty is anchored to), the cycle is redone with the
    /// orthonormal Procrustes step.
    #[default]
    Safeguarded,
    /// Least squares followed by QR, unconditionally.
    LeastSquaresQr,
    /// Exact surrogate minimizer over orthonormal score matrices.
    Procrustes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k: usize,
    pub bound: Bound,
    pub link: Link,
    /// One entry per component, or a single entry broadcast to all of them.
    pub lambda: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    pub zero_eps: f64,
    pub prob_clamp: f64,
    pub score_step: ScoreStep,
}

impl FitConfig {
    pub fn new(k: usize) -> Self {
        FitConfig {
            k,
            bound: Bound::Uniform,
            link: Link::Logit,
            lambda: vec![0.0],
            tol: 1e-6,
            max_iter: 2000,
            restarts: 1,
            seed: 0,
            zero_eps: 1e-10,
            prob_clamp: DEFAULT_PROB_CLAMP,
            score_step: ScoreStep::Safeguarded,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = vec![lambda];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_bound(mut self, bound: Bound) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Per-component penalties after broadcasting.
    pub fn lambda_vec(&self) -> Vec<f64> {
        if self.lambda.len() == 1 {
            vec![self.lambda[0]; self.k]
        } else {
            self.lambda.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SlpcaError::config("k must be at least 1"));
        }
        if self.lambda.len() != 1 && self.lambda.len() != self.k {
            return Err(SlpcaError::config(format!(
                "lambda needs 1 or {} entries, got {}",
                self.k,
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(SlpcaError::config("lambda entries must be finite and nonnegative"));
        }
        if !(self.tol > 0.0) {
            return Err(SlpcaError::config("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(SlpcaError::config("max_iter must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(SlpcaError::config("restarts must be at least 1"));
        }
        if !(self.zero_eps > 0.0) {
            return Err(SlpcaError::config("zero_eps must be positive"));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(SlpcaError::config("prob_clamp must lie in (0, 0.5)"));
        }
        Ok(())
    }

    fn check_data(&self, data: &BinaryDataMatrix) -> Result<()> {
        self.validate()?;
        let (n, d) = data.shape();
        if self.k > n.min(d) {
            return Err(SlpcaError::config(format!(
                "k = {} exceeds min(n, d) = {}",
                self.k,
                n.min(d)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: SlpcaModel,
    /// Penalized objective at the starting point and after every cycle.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub nnz: usize,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the starting value")
    }
}

/// Starting parameters for one MM run.
#[derive(Debug, Clone)]
struct Start {
    mu: DVector<f64>,
    scores: DMatrix<f64>,
    loadings: DMatrix<f64>,
    sigma2: Option<f64>,
}

const MEAN_CLAMP: (f64, f64) = (0.05, 0.95);
const INIT_LOADING_SD: f64 = 0.1;
const SIGMA2_FLOOR: f64 = 1e-8;

fn initial_intercept(data: &BinaryDataMatrix, link: Link) -> DVector<f64> {
    DVector::from_fn(data.ncols(), |j, _| {
        let m = data.column_mean(j);
        match data.kind(j) {
            ColumnKind::Continuous => m.unwrap_or(0.0),
            ColumnKind::Binary => {
                let p = m.unwrap_or(0.5).clamp(MEAN_CLAMP.0, MEAN_CLAMP.1);
                match link {
                    Link::Logit => (p / (1.0 - p)).ln(),
                    Link::Probit => -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p),
                }
            }
        }
    })
}

fn random_start(data: &BinaryDataMatrix, cfg: &FitConfig, restart: usize) -> Start {
    let (n, d) = data.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let raw = DMatrix::from_fn(n, cfg.k, |_, _| StandardNormal.sample(&mut rng));
    let (scores, _) = thin_qr(&raw);
    let normal = Normal::new(0.0, INIT_LOADING_SD).expect("valid sd");
    let loadings = DMatrix::from_fn(d, cfg.k, |_, _| normal.sample(&mut rng));
    Start {
        mu: initial_intercept(data, cfg.link),
        scores,
        loadings,
        sigma2: data.has_continuous().then_some(1.0),
    }
}

fn theta_of(mu: &DVector<f64>, scores: &DMatrix<f64>, loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let mut theta = scores * loadings.transpose();
    for (j, mut col) in theta.column_iter_mut().enumerate() {
        col.add_scalar_mut(mu[j]);
    }
    theta
}

fn objective_at(
    data: &BinaryDataMatrix,
    theta: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    lambda: &[f64],
    link: Link,
    sigma2: Option<f64>,
    prob_clamp: f64,
) -> Result<f64> {
    let ll = log_likelihood_theta(data, theta, link, sigma2, prob_clamp);
    let s = -ll + data.nrows() as f64 * penalty_unchecked(loadings, lambda);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(SlpcaError::Numerical("penalized objective is not finite".into()))
    }
}

/// `RSS / N` over the observed continuous cells, floored.
fn update_sigma2(data: &BinaryDataMatrix, theta: &DMatrix<f64>) -> f64 {
    let mut rss = crate::model::CompensatedSum::default();
    let mut count = 0usize;
    for j in 0..data.ncols() {
        if data.kind(j) != ColumnKind::Continuous {
            continue;
        }
        for i in 0..data.nrows() {
            if let Some(y) = data.get(i, j) {
                let r = y - theta[(i, j)];
                rss.add(r * r);
                count += 1;
            }
        }
    }
    (rss.value() / count.max(1) as f64).max(SIGMA2_FLOOR)
}

/// One full MM cycle from `(mu, scores, loadings)` with working values built
/// at `theta`. Returns the updated parameters.
#[allow(clippy::too_many_arguments)]
fn mm_cycle(
    data: &BinaryDataMatrix,
    cfg: &FitConfig,
    lambda: &[f64],
    theta: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    sigma2: Option<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = data.nrows();
    let wv = build_working(theta, data, cfg.link, cfg.bound, sigma2)?;
    let mu = update_intercept(&wv, scores, loadings)?;

    let procrustes = |wv: &working::WorkingValues| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = procrustes_scores(wv, &mu, scores, loadings)?;
        let b = update_loadings(wv, &mu, &a, loadings, lambda, n, cfg.zero_eps);
        Ok((a, b))
    };
    let least_squares = |wv: &working::WorkingValues| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let up = update_scores(wv, &mu, loadings, scores)?;
        let b = update_loadings(wv, &mu, &up.scores, loadings, lambda, n, cfg.zero_eps);
        Ok((up.scores, b))
    };

    let (a, b) = match cfg.score_step {
        ScoreStep::Procrustes => procrustes(&wv)?,
        ScoreStep::LeastSquaresQr => least_squares(&wv)?,
        ScoreStep::Safeguarded => {
            let (a, b) = least_squares(&wv)?;
            let penalized = lambda.iter().any(|&l| l > 0.0);
            if !penalized {
                (a, b)
            } else {
                let g_start = quadratic_part(&wv, theta) + 0.5 * n as f64 * penalty_unchecked(loadings, lambda);
                let g_new = quadratic_part(&wv, &theta_of(&mu, &a, &b)) + penalty_surrogate(&b, loadings, lambda, n);
                if g_new <= g_start {
                    (a, b)
                } else {
                    procrustes(&wv)?
                }
            }
        }
    };
    Ok((mu, a, b))
}

fn run(data: &BinaryDataMatrix, cfg: &FitConfig, start: Start) -> Result<FitResult> {
    let lambda = cfg.lambda_vec();
    let Start {
        mut mu,
        mut scores,
        mut loadings,
        mut sigma2,
    } = start;
    // loadings below the absorption threshold are zero from the outset
    loadings.apply(|b| {
        if b.abs() < cfg.zero_eps {
            *b = 0.0
        }
    });
    let mut theta = theta_of(&mu, &scores, &loadings);
    let mut trace = vec![objective_at(data, &theta, &loadings, &lambda, cfg.link, sigma2, cfg.prob_clamp)?];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let (m, a, b) = mm_cycle(data, cfg, &lambda, &theta, &scores, &loadings, sigma2)?;
        mu = m;
        scores = a;
        loadings = b;
        theta = theta_of(&mu, &scores, &loadings);
        if sigma2.is_some() {
            sigma2 = Some(update_sigma2(data, &theta));
        }
        iterations += 1;
        let s = objective_at(data, &theta, &loadings, &lambda, cfg.link, sigma2, cfg.prob_clamp)?;
        let prev = *trace.last().unwrap();
        trace.push(s);
        if (prev - s).abs() / (prev.abs() + 1.0) < cfg.tol {
            converged = true;
            break;
        }
    }

    let model = SlpcaModel::from_parts_unchecked(mu, scores, loadings, cfg.link, lambda, sigma2);
    let nnz = model.nnz();
    Ok(FitResult {
        model,
        objective_trace: trace,
        iterations,
        converged,
        nnz,
    })
}

/// Fits from `cfg.restarts` seeded random starts and keeps the lowest final
/// objective (lowest restart index on ties). Restarts run in parallel; each
/// has its own RNG stream, so the result does not depend on scheduling.
pub fn fit(data: &BinaryDataMatrix, cfg: &FitConfig) -> Result<FitResult> {
    cfg.check_data(data)?;
    let results: Vec<Result<FitResult>> = if cfg.restarts == 1 {
        vec![run(data, cfg, random_start(data, cfg, 0))]
    } else {
        (0..cfg.restarts)
            .into_par_iter()
            .map(|r| run(data, cfg, random_start(data, cfg, r)))
            .collect()
    };
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for res in results {
        match res {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.objective() < b.objective()) {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart ran"))
}

/// Fits starting from the parameters of `start` (warm start). The penalty,
/// link and controls come from `cfg`; `cfg.restarts` and `cfg.seed` are
/// unused. Loadings of `start` that are exactly zero stay zero when λ > 0.
pub fn fit_from(data: &BinaryDataMatrix, cfg: &FitConfig, start: &SlpcaModel) -> Result<FitResult> {
    cfg.check_data(data)?;
    if start.nrows() != data.nrows() || start.ncols() != data.ncols() || start.rank() != cfg.k {
        return Err(SlpcaError::dims(format!(
            "warm start is {}x{} of rank {}, need {}x{} of rank {}",
            start.nrows(),
            start.ncols(),
            start.rank(),
            data.nrows(),
            data.ncols(),
            cfg.k
        )));
    }
    let sigma2 = if data.has_continuous() {
        Some(start.sigma2().unwrap_or(1.0))
    } else {
        None
    };
    run(
        data,
        cfg,
        Start {
            mu: start.mu().clone(),
            scores: start.scores().clone(),
            loadings: start.loadings().clone(),
            sigma2,
        },
    )
}
