use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use slpca::evaluation::{
    bootstrap_envelope, group_f_test, pearson_residuals, permutation_f_test, residual_pairwise_correlations,
    BootstrapConfig,
};
use slpca::selection::{default_fine_grid, default_rough_grid, GridStart, SelectionReport};
use slpca::simulation::{run_experiment, ExperimentConfig, EXPERIMENT_TOL};
use slpca::{fit, select_k, select_lambda, BinaryDataMatrix, Bound, FitConfig, FitResult, Link, SelectionConfig};

use crate::error::CliError;
use crate::io::{self, fmt_f64, load_matrix, write_model, write_rows};
use crate::manifest::RunManifest;
use crate::specfile::{parse_index_list, parse_modes, parse_spec};

#[derive(Debug, Parser)]
#[command(name = "slpca", version, about = "Sparse logistic PCA for binary data")]
pub struct Cli {
    /// Cap on worker threads used inside library calls.
    #[arg(long, global = true, env = "SLPCA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model at a fixed rank.
    Fit(FitCmd),
    /// Staged BIC search over the penalty and the rank.
    Select(SelectCmd),
    /// Run a simulation experiment described by a spec file.
    Simulate(SimulateCmd),
    /// Parametric bootstrap envelopes of the fitted probabilities.
    Bootstrap(BootstrapCmd),
    /// Residual correlations and group F tests on the scores.
    Diagnose(DiagnoseCmd),
}

/// Solver controls shared by the commands that fit.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value = "logit")]
    pub link: Link,
    #[arg(long, default_value = "uniform")]
    pub bound: Bound,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SolverArgs {
    fn config(&self, k: usize, lambda: f64) -> FitConfig {
        FitConfig {
            max_iter: self.max_iter,
            restarts: self.restarts,
            ..FitConfig::new(k)
                .with_lambda(lambda)
                .with_link(self.link)
                .with_bound(self.bound)
                .with_tol(self.tol)
                .with_seed(self.seed)
        }
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    /// CSV data file.
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, conflicts_with = "select_lambda")]
    pub lambda: Option<f64>,
    /// Choose λ by BIC over --grid instead of fixing it.
    #[arg(long)]
    pub select_lambda: bool,
    /// Comma-separated λ values for --select-lambda; defaults to the fine grid.
    #[arg(long, requires = "select_lambda")]
    pub grid: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectCmd {
    pub input: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub k_init: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Comma-separated λ values for the rough stage.
    #[arg(long)]
    pub rough_grid: Option<String>,
    /// Comma-separated λ values for the fine stage.
    #[arg(long)]
    pub fine_grid: Option<String>,
    /// Fit every grid point from a random start instead of the previous solution.
    #[arg(long)]
    pub fresh_starts: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    /// Key-value spec file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Modes to run, e.g. `reg:true,nonreg:true,reg:select`.
    #[arg(long, default_value = "reg:true,nonreg:true")]
    pub modes: String,
    /// Stopping tolerance of every experiment fit.
    #[arg(long, default_value_t = EXPERIMENT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// λ grid of the fixed-rank regularized modes; defaults to the fine grid.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long, default_value_t = 30)]
    pub k_init: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapCmd {
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub n_boot: usize,
    /// Refit replicates from random starts rather than from the estimate.
    #[arg(long)]
    pub cold: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseCmd {
    pub input: PathBuf,
    /// Directory written by `fit` or `select`; otherwise a model is fitted here.
    #[arg(long, conflicts_with = "k")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// One group label per data row.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// One line per variable group: column names or 1-based indices and ranges.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Label permutations per component; 0 skips the check.
    #[arg(long, default_value_t = 999)]
    pub n_perm: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::validation("--threads must be positive"));
        }
        // Fails only if a pool already exists, which keeps the earlier cap.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Fit(c) => run_fit(c),
        Command::Select(c) => run_select(c),
        Command::Simulate(c) => run_simulate(c),
        Command::Bootstrap(c) => run_bootstrap(c),
        Command::Diagnose(c) => run_diagnose(c),
    }
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let grid = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| CliError::validation(format!("bad grid value '{t}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(CliError::validation("grid is empty"));
    }
    Ok(grid)
}

const GRID_HEADER: [&str; 9] = [
    "lambda",
    "k",
    "bic",
    "nnz",
    "df",
    "log_likelihood",
    "objective",
    "iterations",
    "converged",
];

fn write_report(path: &Path, report: &SelectionReport) -> Result<(), CliError> {
    let header: Vec<String> = GRID_HEADER.iter().map(|s| s.to_string()).chain(["chosen".into()]).collect();
    let rows = report.rows.iter().enumerate().map(|(i, r)| {
        vec![
            fmt_f64(r.lambda),
            r.k.to_string(),
            fmt_f64(r.bic),
            r.nnz.to_string(),
            r.df.to_string(),
            fmt_f64(r.log_likelihood),
            fmt_f64(r.objective),
            r.iterations.to_string(),
            r.converged.to_string(),
            (report.chosen == Some(i)).to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

fn chosen_fit(report: SelectionReport) -> Result<FitResult, CliError> {
    report
        .best
        .ok_or_else(|| CliError::Numerical("no grid point produced a fit".into()))
}

#[derive(Serialize)]
struct FitRunConfig<'a> {
    input: &'a Path,
    fit: &'a FitConfig,
    lambda_grid: Option<&'a [f64]>,
}

fn run_fit(c: FitCmd) -> Result<(), CliError> {
    let started = crate::manifest::now_unix();
    let data = load_matrix(&c.input)?;
    io::ensure_dir(&c.out)?;
    let (cfg, grid) = if c.select_lambda {
        let grid = match &c.grid {
            Some(g) => parse_grid(g)?,
            None => default_fine_grid(),
        };
        (c.solver.config(c.k, 0.0), Some(grid))
    } else {
        let lambda = c
            .lambda
            .ok_or_else(|| CliError::validation("give --lambda or --select-lambda"))?;
        (c.solver.config(c.k, lambda), None)
    };
    let result = match &grid {
        Some(grid) => {
            let report = select_lambda(&data, c.k, grid, &SelectionConfig::new(cfg.clone()))?;
            write_report(&c.out.join("selection.csv"), &report)?;
            chosen_fit(report)?
        }
        None => fit(&data, &cfg)?,
    };
    write_model(&data, &result, &c.out)?;
    let run_cfg = FitRunConfig {
        input: &c.input,
        fit: &cfg,
        lambda_grid: grid.as_deref(),
    };
    RunManifest::new("fit", &run_cfg, cfg.seed, started)?
        .with_input("data", &c.input)?
        .finish(&c.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SelectRunConfig<'a> {
    input: &'a Path,
    selection: &'a SelectionConfig,
}

fn run_select(c: SelectCmd) -> Result<(), CliError> {
    let started = crate::manifest::now_unix();
    let data = load_matrix(&c.input)?;
    io::ensure_dir(&c.out)?;
    let mut cfg = SelectionConfig::new(c.solver.config(1, 0.0));
    cfg.k_init = c.k_init;
    cfg.k_max = c.k_max;
    if c.fresh_starts {
        cfg.start = GridStart::Fresh;
    }
    cfg.rough_grid = match &c.rough_grid {
        Some(g) => parse_grid(g)?,
        None => default_rough_grid(),
    };
    cfg.fine_grid = match &c.fine_grid {
        Some(g) => parse_grid(g)?,
        None => default_fine_grid(),
    };
    let sel = select_k(&data, &cfg)?;
    write_report(&c.out.join("rough.csv"), &sel.rough)?;
    write_report(&c.out.join("rank.csv"), &sel.rank)?;
    write_report(&c.out.join("fine.csv"), &sel.fine)?;
    write_model(&data, &sel.fit, &c.out)?;
    let run_cfg = SelectRunConfig {
        input: &c.input,
        selection: &cfg,
    };
    RunManifest::new("select", &run_cfg, cfg.fit.seed, started)?
        .with_input("data", &c.input)?
        .finish(&c.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateRunConfig<'a> {
    spec: &'a slpca::simulation::SimulationSpec,
    modes: &'a [slpca::simulation::Mode],
    experiment: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct SimulateSummary {
    baseline: f64,
    modes: Vec<serde_json::Value>,
}

fn run_simulate(c: SimulateCmd) -> Result<(), CliError> {
    let started = crate::manifest::now_unix();
    let mut spec = parse_spec(&io::read_text(&c.spec)?)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let modes = parse_modes(&c.modes)?;
    if modes.is_empty() {
        return Err(CliError::validation("no modes given"));
    }
    io::ensure_dir(&c.out)?;
    let fit_cfg = FitConfig {
        max_iter: c.max_iter,
        ..FitConfig::new(spec.k_true).with_tol(c.tol).with_seed(spec.seed)
    };
    let mut cfg = ExperimentConfig::new(fit_cfg);
    if let Some(g) = &c.lambda_grid {
        cfg.lambda_grid = parse_grid(g)?;
    }
    cfg.selection.k_init = c.k_init;
    cfg.selection.k_max = c.k_max;

    let table = run_experiment(&spec, &modes, &cfg)?;
    io::write_text(&c.out.join("table.tsv"), &table.to_tsv())?;
    let header: Vec<String> = ["mode", "replicate", "angle", "k", "lambda", "nnz", "false_positive", "monotone"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for m in &table.modes {
        for (r, o) in m.outcomes.iter().enumerate() {
            let mut row = vec![m.mode.label(), (r + 1).to_string()];
            match o {
                Some(o) => row.extend([
                    fmt_f64(o.angle),
                    o.k.to_string(),
                    fmt_f64(o.lambda),
                    o.nnz.to_string(),
                    o.false_positive.map_or(io::NA.to_string(), fmt_f64),
                    o.monotone.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(io::NA.to_string(), 6)),
            }
            rows.push(row);
        }
    }
    write_rows(&c.out.join("outcomes.csv"), &header, rows)?;
    let summary = SimulateSummary {
        baseline: table.baseline,
        modes: table
            .modes
            .iter()
            .map(|m| {
                serde_json::json!({
                    "mode": m.mode.label(),
                    "angle_mean": m.angle_mean,
                    "angle_se": m.angle_se,
                    "fp_mean": m.fp_mean,
                    "fp_se": m.fp_se,
                    "k_frequencies": m.k_frequencies,
                    "failures": m.failures,
                })
            })
            .collect(),
    };
    io::write_json(&c.out.join("summary.json"), &summary)?;
    let run_cfg = SimulateRunConfig {
        spec: &spec,
        modes: &modes,
        experiment: &cfg,
    };
    RunManifest::new("simulate", &run_cfg, spec.seed, started)?
        .with_input("spec", &c.spec)?
        .finish(&c.out)?;
    Ok(())
}

#[derive(Serialize)]
struct BootstrapRunConfig<'a> {
    input: &'a Path,
    fit: &'a FitConfig,
    bootstrap: &'a BootstrapConfig,
}

#[derive(Serialize)]
struct BootstrapSummary {
    successes: usize,
    failures: usize,
    mean_width: f64,
    coverage: f64,
}

fn run_bootstrap(c: BootstrapCmd) -> Result<(), CliError> {
    let started = crate::manifest::now_unix();
    let data = load_matrix(&c.input)?;
    io::ensure_dir(&c.out)?;
    let cfg = c.solver.config(c.k, c.lambda);
    let mut boot = BootstrapConfig::new(c.n_boot, cfg.seed);
    boot.warm_start = !c.cold;
    let result = fit(&data, &cfg)?;
    let env = bootstrap_envelope(&data, &result.model, &cfg, &boot)?;
    write_model(&data, &result, &c.out)?;
    let names = io::variable_names(&data);
    let header: Vec<String> = ["row", "variable", "point", "lower", "upper"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = env.cells.iter().enumerate().map(|(t, &(i, j))| {
        vec![
            (i + 1).to_string(),
            names[j].clone(),
            fmt_f64(env.point[t]),
            fmt_f64(env.lower[t]),
            fmt_f64(env.upper[t]),
        ]
    });
    write_rows(&c.out.join("envelope.csv"), &header, rows)?;
    io::write_json(
        &c.out.join("bootstrap.json"),
        &BootstrapSummary {
            successes: env.successes,
            failures: env.failures,
            mean_width: env.mean_width(),
            coverage: env.coverage(),
        },
    )?;
    let run_cfg = BootstrapRunConfig {
        input: &c.input,
        fit: &cfg,
        bootstrap: &boot,
    };
    RunManifest::new("bootstrap", &run_cfg, cfg.seed, started)?
        .with_input("data", &c.input)?
        .finish(&c.out)?;
    Ok(())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<String>, CliError> {
    let mut lines: Vec<String> = io::read_text(path)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    // A single extra line is taken to be a header.
    if lines.len() == n + 1 {
        lines.remove(0);
    }
    if lines.len() != n {
        return Err(CliError::validation(format!(
            "{}: {} labels for {n} rows",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines)
}

fn read_groups(path: &Path, data: &BinaryDataMatrix) -> Result<Vec<Vec<usize>>, CliError> {
    let names = io::variable_names(data);
    io::read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut cols = Vec::new();
            for tok in line.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if let Some(j) = names.iter().position(|n| n == tok) {
                    cols.push(j);
                } else {
                    let idx = parse_index_list(tok)
                        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
                    cols.extend(idx);
                }
            }
            Ok(cols)
        })
        .collect()
}

#[derive(Serialize)]
struct DiagnoseRunConfig<'a> {
    input: &'a Path,
    model: Option<&'a Path>,
    fit: Option<&'a FitConfig>,
    n_perm: usize,
}

fn run_diagnose(c: DiagnoseCmd) -> Result<(), CliError> {
    let started = crate::manifest::now_unix();
    let data = load_matrix(&c.input)?;
    io::ensure_dir(&c.out)?;
    let mut cfg = None;
    let model = match (&c.model, c.k) {
        (Some(dir), _) => io::read_model(dir)?,
        (None, Some(k)) => {
            let fc = c.solver.config(k, c.lambda);
            let result = fit(&data, &fc)?;
            write_model(&data, &result, &c.out)?;
            cfg = Some(fc);
            result.model
        }
        (None, None) => return Err(CliError::validation("give --model or --k")),
    };
    if model.nrows() != data.nrows() || model.ncols() != data.ncols() {
        return Err(CliError::validation("model and data shapes differ"));
    }

    if let Some(gpath) = &c.groups {
        let groups = read_groups(gpath, &data)?;
        let res = pearson_residuals(&data, &model)?;
        let corr = residual_pairwise_correlations(&res, &groups)?;
        let header = vec!["group".to_string(), "pair".to_string(), "correlation".to_string()];
        let rows = corr.groups.iter().enumerate().flat_map(|(g, list)| {
            list.iter()
                .enumerate()
                .map(move |(p, &r)| vec![(g + 1).to_string(), (p + 1).to_string(), fmt_f64(r)])
        });
        write_rows(&c.out.join("residual_correlations.csv"), &header, rows)?;
    }

    if let Some(lpath) = &c.labels {
        let labels = read_labels(lpath, data.nrows())?;
        let header: Vec<String> = ["component", "f", "p_value", "df_between", "df_within", "permutation_p"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for l in 0..model.rank() {
            let scores: Vec<f64> = model.scores().column(l).iter().copied().collect();
            let t = group_f_test(&scores, &labels)?;
            let perm = if c.n_perm > 0 {
                let seed = c.solver.seed.wrapping_add(l as u64);
                fmt_f64(permutation_f_test(&scores, &labels, c.n_perm, seed)?)
            } else {
                io::NA.to_string()
            };
            rows.push(vec![
                (l + 1).to_string(),
                fmt_f64(t.f),
                fmt_f64(t.p_value),
                t.df_between.to_string(),
                t.df_within.to_string(),
                perm,
            ]);
        }
        write_rows(&c.out.join("ftests.csv"), &header, rows)?;
    }

    let run_cfg = DiagnoseRunConfig {
        input: &c.input,
        model: c.model.as_deref(),
        fit: cfg.as_ref(),
        n_perm: c.n_perm,
    };
    let mut manifest = RunManifest::new("diagnose", &run_cfg, c.solver.seed, started)?.with_input("data", &c.input)?;
    if let Some(p) = &c.labels {
        manifest = manifest.with_input("labels", p)?;
    }
    if let Some(p) = &c.groups {
        manifest = manifest.with_input("groups", p)?;
    }
    manifest.finish(&c.out)?;
    Ok(())
}
