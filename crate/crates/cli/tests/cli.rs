use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slpca::simulation::{generate_dataset, SimulationSpec};
use slpca::{BinaryDataMatrix, ColumnKind, SlpcaError};
use slpca_cli::io::{fmt_f64, read_labelled_matrix, FitSummary};
use slpca_cli::{load_matrix, read_model, CliError, RunManifest};
use tempfile::TempDir;

fn slpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slpca"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = slpca(args);
    assert!(
        out.status.success(),
        "slpca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn to_csv(data: &BinaryDataMatrix, header: bool) -> String {
    let mut s = String::new();
    if header {
        let names: Vec<String> = (1..=data.ncols()).map(|j| format!("v{j}")).collect();
        s.push_str(&names.join(","));
        s.push('\n');
    }
    for i in 0..data.nrows() {
        let row: Vec<String> = (0..data.ncols())
            .map(|j| match data.get(i, j) {
                Some(v) => format!("{v}"),
                None => "NA".into(),
            })
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Two planted sparse components on 40 rows and 16 variables.
fn planted(dir: &Path) -> PathBuf {
    let spec = SimulationSpec {
        n: 40,
        d: 16,
        k_true: 2,
        snr: vec![40.0, 30.0],
        support: vec![(0..4).collect(), (4..8).collect()],
        replicates: 2,
        seed: 11,
        baseline_reps: 1,
        baseline: Some(1.0),
        baseline_tol: 1e-5,
    };
    let ds = generate_dataset(&spec, 1.0, 0).unwrap();
    write(dir, "planted.csv", &to_csv(&ds.data, true))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_summary(dir: &Path) -> FitSummary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn parses_small_matrix_with_missing_cell() {
    let t = TempDir::new().unwrap();
    let p = write(t.path(), "m.csv", "0,1,NA\n1,0,0");
    let m = load_matrix(&p).unwrap();
    assert_eq!(m.shape(), (2, 3));
    assert_eq!(m.missing_count(), 1);
    assert!(m.is_missing(0, 2));
    assert_eq!(m.get(1, 0), Some(1.0));
    assert!(m.names().is_none());
}

#[test]
fn header_names_are_kept() {
    let t = TempDir::new().unwrap();
    let p = write(t.path(), "m.csv", "snp1,snp2\n0,1\n1,1\n");
    let m = load_matrix(&p).unwrap();
    assert_eq!(m.names().unwrap(), ["snp1", "snp2"]);
    assert_eq!(m.shape(), (2, 2));
}

#[test]
fn bad_binary_cell_names_its_position() {
    let t = TempDir::new().unwrap();
    let p = write(t.path(), "m.csv", "0,1,2\n1,0,0\n");
    let e = load_matrix(&p).unwrap_err();
    assert!(e.to_string().contains("(row 1, col 3)"), "{e}");
    assert_eq!(e.exit_code(), 2);

    let p = write(t.path(), "h.csv", "a,b\n0,1\n1,x\n");
    let e = load_matrix(&p).unwrap_err();
    assert!(e.to_string().contains("(row 2, col 2)"), "{e}");
}

#[test]
fn ragged_and_empty_files_are_rejected() {
    let t = TempDir::new().unwrap();
    let e = load_matrix(&write(t.path(), "r.csv", "0,1\n1\n")).unwrap_err();
    assert!(e.to_string().contains("ragged"), "{e}");
    let e = load_matrix(&write(t.path(), "e.csv", "")).unwrap_err();
    assert!(e.to_string().contains("empty"), "{e}");
    let e = load_matrix(&t.path().join("absent.csv")).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn real_columns_are_continuous_unless_overridden() {
    let t = TempDir::new().unwrap();
    let p = write(t.path(), "m.csv", "0,1.5\n1,2\n0,NA\n");
    let m = load_matrix(&p).unwrap();
    assert_eq!(m.kinds(), [ColumnKind::Binary, ColumnKind::Continuous]);

    let p = write(t.path(), "s.csv", "0,1\n1,0\n");
    write(t.path(), "s.csv.schema", "binary,continuous\n");
    let m = load_matrix(&p).unwrap();
    assert_eq!(m.kinds(), [ColumnKind::Binary, ColumnKind::Continuous]);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(CliError::from(SlpcaError::DegenerateFactor("x".into())).exit_code(), 3);
    assert_eq!(CliError::from(SlpcaError::Numerical("x".into())).exit_code(), 3);
    assert_eq!(CliError::from(SlpcaError::InvalidConfig("x".into())).exit_code(), 2);
}

#[test]
fn fit_writes_consistent_outputs() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let out = t.path().join("fit");
    ok(&["fit", path(&input), "--k", "2", "--lambda", "0.01", "--tol", "1e-8", "--out", path(&out)]);

    for f in ["mu.csv", "scores.csv", "loadings.csv", "trace.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = read_summary(&out);
    assert_eq!((summary.n, summary.d, summary.k), (40, 16, 2));
    assert_eq!(summary.lambda, 0.01);

    let (names, b) = read_labelled_matrix(&out.join("loadings.csv")).unwrap();
    assert_eq!(names[0], "v1");
    assert_eq!(b.iter().filter(|&&v| v != 0.0).count(), summary.nnz);
    assert!(summary.nnz < 32, "penalty should zero some loadings");
    let text = fs::read_to_string(out.join("loadings.csv")).unwrap();
    assert!(text.lines().skip(1).any(|l| l.split(',').skip(1).any(|c| c == "0")));

    let (_, trace) = read_labelled_matrix(&out.join("trace.csv")).unwrap();
    assert_eq!(trace.nrows(), summary.iterations + 1);
    assert_eq!(trace[(trace.nrows() - 1, 0)], summary.objective);

    let model = read_model(&out).unwrap();
    let zeros = |m: &nalgebra::DMatrix<f64>| m.map(|v| v == 0.0);
    assert_eq!(zeros(model.loadings()), zeros(&b));
    assert_eq!(model.nnz(), summary.nnz);

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "fit");
    assert_eq!(manifest.inputs.len(), 1);
    assert_eq!(manifest.inputs[0].sha256.len(), 64);
    assert_eq!(manifest.config["fit"]["k"], 2);
}

#[test]
fn reruns_are_byte_identical() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let a = t.path().join("a");
    let b = t.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "fit", path(&input), "--k", "2", "--lambda", "0.005", "--restarts", "3", "--seed", "9", "--out", path(dir),
        ]);
    }
    for f in ["mu.csv", "scores.csv", "loadings.csv", "trace.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = t.path().join("c");
    ok(&["fit", path(&input), "--k", "2", "--lambda", "0.005", "--restarts", "3", "--seed", "10", "--out", path(&c)]);
    assert_ne!(fs::read(a.join("scores.csv")).unwrap(), fs::read(c.join("scores.csv")).unwrap());
}

#[test]
fn penalty_extremes_bracket_the_selected_fit() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let nnz = |lambda: Option<&str>| {
        let out = t.path().join(format!("l{}", lambda.unwrap_or("sel")));
        let mut args = vec!["fit", path(&input), "--k", "2", "--tol", "1e-8", "--out", path(&out)];
        match lambda {
            Some(l) => args.extend(["--lambda", l]),
            None => args.extend(["--select-lambda", "--grid", "0,0.002,0.005,0.01,0.02"]),
        }
        ok(&args);
        read_summary(&out).nnz
    };
    let dense = nnz(Some("0"));
    let empty = nnz(Some("1000"));
    let chosen = nnz(None);
    assert_eq!(dense, 16 * 2);
    assert_eq!(empty, 0);
    assert!(empty <= chosen && chosen <= dense);
    assert!(t.path().join("lsel").join("selection.csv").exists());
}

#[test]
fn validation_and_io_exit_codes() {
    let t = TempDir::new().unwrap();
    let bad = write(t.path(), "bad.csv", "0,1,2\n1,0,0\n");
    let out = slpca(&["fit", path(&bad), "--k", "1", "--lambda", "0", "--out", path(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("(row 1, col 3)"));

    let out = slpca(&["fit", path(&t.path().join("nope.csv")), "--k", "1", "--lambda", "0", "--out", path(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));

    let input = planted(t.path());
    let out = slpca(&["fit", path(&input), "--k", "99", "--lambda", "0", "--out", path(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = slpca(&["fit", path(&input), "--k", "1", "--lambda", "-1", "--out", path(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_cap_from_environment() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let out = Command::new(env!("CARGO_BIN_EXE_slpca"))
        .args(["fit", path(&input), "--k", "1", "--lambda", "0", "--restarts", "2"])
        .arg("--out")
        .arg(t.path().join("o"))
        .env("SLPCA_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_slpca"))
        .args(["fit", path(&input), "--k", "1", "--lambda", "0"])
        .arg("--out")
        .arg(t.path().join("o"))
        .env("SLPCA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn select_writes_stage_tables() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let out = t.path().join("sel");
    ok(&[
        "select", path(&input), "--k-init", "4", "--k-max", "3", "--rough-grid", "0,0.005,0.02", "--fine-grid",
        "0.002,0.005,0.01", "--out", path(&out),
    ]);
    for f in ["rough.csv", "rank.csv", "fine.csv", "summary.json", "manifest.json", "loadings.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let rank = fs::read_to_string(out.join("rank.csv")).unwrap();
    assert_eq!(rank.lines().count(), 1 + 3);
    let summary = read_summary(&out);
    assert!((1..=3).contains(&summary.k));
}

#[test]
fn simulate_from_spec_file() {
    let t = TempDir::new().unwrap();
    let spec = write(
        t.path(),
        "sim.spec",
        "# small two-block design\nn = 30\nd = 20\nsnr = 30, 20\nsupport = 1-4; 5-8\nreplicates = 2\nseed = 3\nbaseline = 1\n",
    );
    let out = t.path().join("sim");
    ok(&[
        "simulate", "--spec", path(&spec), "--tol", "1e-6", "--lambda-grid", "0.002,0.01", "--out", path(&out),
    ]);
    let table = fs::read_to_string(out.join("table.tsv")).unwrap();
    assert!(table.contains("regularized/k=true"));
    assert!(table.contains("nonregularized/k=true"));
    let outcomes = fs::read_to_string(out.join("outcomes.csv")).unwrap();
    assert_eq!(outcomes.lines().count(), 1 + 2 * 2);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config["spec"]["d"], 20);

    let bad = write(t.path(), "bad.spec", "n = 30\nwidth = 3\n");
    let res = slpca(&["simulate", "--spec", path(&bad), "--out", path(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bootstrap_writes_envelope() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let out = t.path().join("boot");
    ok(&["bootstrap", path(&input), "--k", "2", "--lambda", "0.005", "--n-boot", "10", "--out", path(&out)]);
    let text = fs::read_to_string(out.join("envelope.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 40 * 16);
    for r in &rows {
        let v: Vec<f64> = r[2..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v[1] <= v[2], "{r:?}");
    }
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bootstrap.json")).unwrap()).unwrap();
    assert_eq!(b["successes"].as_u64().unwrap() + b["failures"].as_u64().unwrap(), 10);
}

#[test]
fn diagnose_separates_planted_groups() {
    let t = TempDir::new().unwrap();
    // Rows 1-20 carry variables 1-6, rows 21-40 carry variables 7-12.
    let mut csv = String::new();
    let mut labels = String::from("group\n");
    for i in 0..40 {
        let g = i / 20;
        let row: Vec<String> = (0..12)
            .map(|j| {
                let on = (j / 6) == g;
                // a little deterministic noise
                let flip = (i * 7 + j * 3) % 11 == 0;
                ((on != flip) as u8).to_string()
            })
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
        labels.push_str(if g == 0 { "a\n" } else { "b\n" });
    }
    let input = write(t.path(), "g.csv", &csv);
    let labels = write(t.path(), "labels.txt", &labels);
    let groups = write(t.path(), "groups.txt", "1-6\n7-12\n");
    let out = t.path().join("diag");
    ok(&[
        "diagnose", path(&input), "--k", "1", "--labels", path(&labels), "--groups", path(&groups), "--n-perm", "199",
        "--out", path(&out),
    ]);
    let (_, f) = read_labelled_matrix(&out.join("ftests.csv")).unwrap();
    assert!(f[(0, 1)] < 1e-4, "p = {}", f[(0, 1)]);
    assert!(f[(0, 4)] <= 1.0 / 200.0 + 1e-12);
    let corr = fs::read_to_string(out.join("residual_correlations.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 2 * 15);

    // Reuse of a saved model gives the same scores and therefore the same test.
    let out2 = t.path().join("diag2");
    ok(&["diagnose", path(&input), "--model", path(&out), "--labels", path(&labels), "--n-perm", "0", "--out", path(&out2)]);
    let (_, f2) = read_labelled_matrix(&out2.join("ftests.csv")).unwrap();
    assert_eq!(f[(0, 1)], f2[(0, 1)]);
    assert!(f2[(0, 4)].is_nan());
}

#[test]
fn written_floats_reload_exactly() {
    let t = TempDir::new().unwrap();
    let input = planted(t.path());
    let out = t.path().join("fit");
    ok(&["fit", path(&input), "--k", "2", "--lambda", "0.003", "--out", path(&out)]);
    let model = read_model(&out).unwrap();
    let text = fs::read_to_string(out.join("scores.csv")).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[1], fmt_f64(model.scores()[(0, 0)]));
}
