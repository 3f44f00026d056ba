//! Simulation protocol: baseline noise level, SNR-calibrated planted data and
//! batch experiments scoring recovered loadings against the truth.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryDataMatrix;
use crate::error::{Result, SlpcaError};
use crate::evaluation::{drop_zero_columns, principal_angle, variable_false_positive_rate, FpDenominator};
use crate::link::logistic;
use crate::selection::{default_fine_grid, select_k, select_lambda, SelectionConfig};
use crate::solver::{fit, FitConfig, FitResult};

/// Stream offset separating baseline draws from replicate draws.
const BASELINE_STREAM: u64 = 1 << 40;

/// Relative tolerance of the unpenalized noise fits behind the baseline.
///
/// Logistic PCA of pure noise has no finite maximizer: the fitted scores
/// keep growing, roughly linearly in the iteration count, so the baseline is
/// a property of the stopping rule. This value stops the noise fits after a
/// few hundred cycles.
pub const BASELINE_TOL: f64 = 1e-5;

/// Relative tolerance for experiment fits. Loadings approach zero only
/// geometrically under the shrinkage update, so a tight tolerance is needed
/// for the exact-zero pattern, and hence BIC, to settle.
pub const EXPERIMENT_TOL: f64 = 1e-9;

/// Fitting rank used by an experiment mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankChoice {
    /// The planted rank.
    True,
    Fixed(usize),
    /// Staged BIC search over k.
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub regularized: bool,
    pub rank: RankChoice,
}

impl Mode {
    pub fn label(&self) -> String {
        let reg = if self.regularized { "regularized" } else { "nonregularized" };
        let k = match self.rank {
            RankChoice::True => "k=true".to_string(),
            RankChoice::Fixed(k) => format!("k={k}"),
            RankChoice::Select => "k=select".to_string(),
        };
        format!("{reg}/{k}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n: usize,
    pub d: usize,
    pub k_true: usize,
    /// Score variance of each planted component in units of the baseline noise level.
    pub snr: Vec<f64>,
    /// Variables carrying a unit loading, per component; pairwise disjoint.
    pub support: Vec<Vec<usize>>,
    pub replicates: usize,
    pub seed: u64,
    /// Replicates of pure noise used to estimate the baseline level.
    pub baseline_reps: usize,
    /// Known baseline level; estimated when absent.
    pub baseline: Option<f64>,
    /// Stopping tolerance of the baseline noise fits.
    pub baseline_tol: f64,
}

impl SimulationSpec {
    /// Two components loading on variables 1–20 and 21–40.
    pub fn two_block(n: usize, d: usize, snr: (f64, f64), replicates: usize, seed: u64) -> Self {
        SimulationSpec {
            n,
            d,
            k_true: 2,
            snr: vec![snr.0, snr.1],
            support: vec![(0..20).collect(), (20..40).collect()],
            replicates,
            seed,
            baseline_reps: 100,
            baseline: None,
            baseline_tol: BASELINE_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k_true == 0 {
            return Err(SlpcaError::config("n, d and k_true must be positive"));
        }
        if self.snr.len() != self.k_true || self.support.len() != self.k_true {
            return Err(SlpcaError::config(format!(
                "snr and support need {} entries each",
                self.k_true
            )));
        }
        if self.snr.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(SlpcaError::config("snr entries must be positive"));
        }
        let mut seen = HashSet::new();
        for (l, s) in self.support.iter().enumerate() {
            if s.is_empty() {
                return Err(SlpcaError::config(format!("support of component {} is empty", l + 1)));
            }
            for &j in s {
                if j >= self.d {
                    return Err(SlpcaError::config(format!("support variable {} exceeds d = {}", j + 1, self.d)));
                }
                if !seen.insert(j) {
                    return Err(SlpcaError::config(format!("variable {} is in two supports", j + 1)));
                }
            }
        }
        if self.baseline_reps == 0 && self.baseline.is_none() {
            return Err(SlpcaError::config("baseline_reps must be positive"));
        }
        if !(self.baseline_tol > 0.0) {
            return Err(SlpcaError::config("baseline_tol must be positive"));
        }
        if let Some(b) = self.baseline {
            if !(b > 0.0) {
                return Err(SlpcaError::config("baseline must be positive"));
            }
        }
        Ok(())
    }

    /// The planted loading matrix.
    pub fn true_loadings(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.d, self.k_true);
        for (l, s) in self.support.iter().enumerate() {
            for &j in s {
                b[(j, l)] = 1.0;
            }
        }
        b
    }

    pub fn true_variables(&self) -> HashSet<usize> {
        self.support.iter().flatten().copied().collect()
    }

    /// The stored baseline, or a fresh estimate from `baseline_reps` draws
    /// using the link and bound of `cfg` and `baseline_tol`.
    pub fn resolve_baseline(&self, cfg: &FitConfig) -> Result<f64> {
        match self.baseline {
            Some(b) => Ok(b),
            None => {
                let c = FitConfig {
                    tol: self.baseline_tol,
                    ..cfg.clone()
                };
                baseline_noise_level_with(self.n, self.d, self.k_true, self.baseline_reps, self.seed, &c)
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean sample variance of the columns of `U·D` from the thin SVD of `ABᵀ`.
pub fn score_variance(result: &FitResult) -> f64 {
    let m = result.model.scores() * result.model.loadings().transpose();
    let k = result.model.rank();
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let n = u.nrows() as f64;
    let mut total = 0.0;
    for &c in idx.iter().take(k) {
        let col = u.column(c) * svd.singular_values[c];
        let mean = col.mean();
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    }
    total / k as f64
}

/// Baseline noise level with default solver controls and [`BASELINE_TOL`].
pub fn baseline_noise_level(n: usize, d: usize, k: usize, n_rep: usize, seed: u64) -> Result<f64> {
    baseline_noise_level_with(n, d, k, n_rep, seed, &FitConfig::new(k).with_tol(BASELINE_TOL))
}

/// Average score variance of unpenalized rank-`k` fits to Bernoulli(1/2)
/// noise, over `n_rep` seeded replicates.
pub fn baseline_noise_level_with(
    n: usize,
    d: usize,
    k: usize,
    n_rep: usize,
    seed: u64,
    cfg: &FitConfig,
) -> Result<f64> {
    if n_rep == 0 {
        return Err(SlpcaError::config("n_rep must be at least 1"));
    }
    let cfg = FitConfig {
        k,
        lambda: vec![0.0],
        seed,
        ..cfg.clone()
    };
    let vals: Vec<Result<f64>> = (0..n_rep)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, BASELINE_STREAM + r as u64);
            let y = DMatrix::from_fn(n, d, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let data = BinaryDataMatrix::from_binary(y)?;
            Ok(score_variance(&fit(&data, &cfg)?))
        })
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / n_rep as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: BinaryDataMatrix,
    pub scores: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub mu: DVector<f64>,
}

/// Draws replicate `replicate` of the planted model: scores of component `l`
/// are i.i.d. `N(0, snr_l · baseline)`, loadings are the unit support
/// indicators, `μ = 0`, and each cell is Bernoulli(π(θ)).
pub fn generate_dataset(spec: &SimulationSpec, baseline: f64, replicate: usize) -> Result<Dataset> {
    spec.validate()?;
    if !(baseline > 0.0) {
        return Err(SlpcaError::config("baseline must be positive"));
    }
    let mut rng = rng_for(spec.seed, replicate as u64);
    let mut scores = DMatrix::zeros(spec.n, spec.k_true);
    for l in 0..spec.k_true {
        let normal = Normal::new(0.0, (spec.snr[l] * baseline).sqrt())
            .map_err(|e| SlpcaError::config(e.to_string()))?;
        for i in 0..spec.n {
            scores[(i, l)] = normal.sample(&mut rng);
        }
    }
    let loadings = spec.true_loadings();
    let theta = &scores * loadings.transpose();
    let y = theta.map(|t| if rng.random::<f64>() < logistic(t) { 1.0 } else { 0.0 });
    Ok(Dataset {
        data: BinaryDataMatrix::from_binary(y)?,
        scores,
        loadings,
        mu: DVector::zeros(spec.d),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Solver controls shared by every fit.
    pub fit: FitConfig,
    /// λ grid searched by regularized modes at a fixed rank.
    pub lambda_grid: Vec<f64>,
    /// Controls of the staged search used by `RankChoice::Select`.
    pub selection: SelectionConfig,
}

impl ExperimentConfig {
    pub fn new(fit: FitConfig) -> Self {
        ExperimentConfig {
            selection: SelectionConfig::new(fit.clone()),
            fit,
            lambda_grid: default_fine_grid(),
        }
    }
}

/// Outcome of one mode on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub angle: f64,
    pub k: usize,
    pub lambda: f64,
    pub nnz: usize,
    /// Variable-level false-positive percentage; `None` when nothing was selected.
    pub false_positive: Option<f64>,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub angle_mean: f64,
    pub angle_se: f64,
    pub fp_mean: f64,
    pub fp_se: f64,
    pub k_frequencies: BTreeMap<usize, usize>,
    /// Per-replicate outcomes in replicate order; `None` for failed replicates.
    pub outcomes: Vec<Option<ModeOutcome>>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub spec: SimulationSpec,
    pub baseline: f64,
    pub modes: Vec<ModeSummary>,
}

/// Mean and standard error (`sd/√m`) of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

fn monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs())
}

fn run_mode(ds: &Dataset, spec: &SimulationSpec, mode: Mode, cfg: &ExperimentConfig, seed: u64) -> Result<ModeOutcome> {
    let fit_cfg = FitConfig {
        seed,
        ..cfg.fit.clone()
    };
    let (result, k) = match mode.rank {
        RankChoice::Select => {
            let mut sel = cfg.selection.clone();
            sel.fit = FitConfig {
                seed,
                ..sel.fit
            };
            if !mode.regularized {
                sel.rough_grid = vec![0.0];
                sel.fine_grid = vec![0.0];
            }
            let out = select_k(&ds.data, &sel)?;
            (out.fit, out.k)
        }
        RankChoice::True | RankChoice::Fixed(_) => {
            let k = match mode.rank {
                RankChoice::Fixed(k) => k,
                _ => spec.k_true,
            };
            let c = FitConfig { k, ..fit_cfg };
            if mode.regularized {
                let sel = SelectionConfig {
                    fit: c,
                    ..cfg.selection.clone()
                };
                let report = select_lambda(&ds.data, k, &cfg.lambda_grid, &sel)?;
                (report.best.expect("complete report"), k)
            } else {
                (fit(&ds.data, &c.with_lambda(0.0))?, k)
            }
        }
    };
    let b_hat = drop_zero_columns(result.model.loadings());
    let angle = if b_hat.ncols() == 0 {
        90.0
    } else {
        principal_angle(&b_hat, &ds.loadings)?.degrees
    };
    let false_positive = variable_false_positive_rate(
        result.model.loadings(),
        &spec.true_variables(),
        FpDenominator::EstimatedNonzeros,
    )
    .ok();
    Ok(ModeOutcome {
        angle,
        k,
        lambda: result.model.lambda().first().copied().unwrap_or(0.0),
        nnz: result.nnz,
        false_positive,
        monotone: monotone(&result.objective_trace),
    })
}

/// Runs every mode on every replicate and aggregates angle, FP% and
/// selected-k statistics. Replicates run in parallel; the table is ordered
/// by replicate index, so it depends only on the inputs.
pub fn run_experiment(spec: &SimulationSpec, modes: &[Mode], cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    spec.validate()?;
    if spec.replicates < 2 {
        return Err(SlpcaError::config("at least two replicates are needed for standard errors"));
    }
    let baseline = spec.resolve_baseline(&cfg.fit)?;
    let per_rep: Vec<Vec<Option<ModeOutcome>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let Ok(ds) = generate_dataset(spec, baseline, r) else {
                return vec![None; modes.len()];
            };
            let seed = spec.seed.wrapping_add(r as u64);
            modes.iter().map(|&m| run_mode(&ds, spec, m, cfg, seed).ok()).collect()
        })
        .collect();

    let summaries = modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let outcomes: Vec<Option<ModeOutcome>> = per_rep.iter().map(|r| r[mi].clone()).collect();
            let ok: Vec<&ModeOutcome> = outcomes.iter().flatten().collect();
            let angles: Vec<f64> = ok.iter().map(|o| o.angle).collect();
            let fps: Vec<f64> = ok.iter().filter_map(|o| o.false_positive).collect();
            let mut k_frequencies = BTreeMap::new();
            for o in &ok {
                *k_frequencies.entry(o.k).or_insert(0) += 1;
            }
            let (angle_mean, angle_se) = mean_se(&angles);
            let (fp_mean, fp_se) = mean_se(&fps);
            ModeSummary {
                mode,
                angle_mean,
                angle_se,
                fp_mean,
                fp_se,
                k_frequencies,
                failures: outcomes.len() - ok.len(),
                outcomes,
            }
        })
        .collect();
    Ok(ExperimentTable {
        spec: spec.clone(),
        baseline,
        modes: summaries,
    })
}

impl ExperimentTable {
    /// Tab-separated summary, one row per mode.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\tangle_mean\tangle_se\tfp_mean\tfp_se\tk_frequencies\tfailures\n");
        for m in &self.modes {
            let freqs: Vec<String> = m.k_frequencies.iter().map(|(k, c)| format!("{k}:{c}")).collect();
            out.push_str(&format!(
                "{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{}\t{}\n",
                m.mode.label(),
                m.angle_mean,
                m.angle_se,
                m.fp_mean,
                m.fp_se,
                freqs.join(","),
                m.failures
            ));
        }
        out
    }
}
