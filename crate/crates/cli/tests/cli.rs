use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metaover"));
    c.env_remove("METAOVER_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn field<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{report}"))
}

/// Data rows of a CSV with a leading `#` header line.
fn rows(text: &str) -> Vec<Vec<String>> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

const SMALL_SWEEP: &str = r#"
[env]
d = 30
d1 = 5
beta = [0.2, 0.6]

[method]
kind = ["maml", "imaml"]
alpha = 0.1
gamma = 5.0

[sweep]
n = [2, 4, 8]
m = 4
num_seeds = 3
master_seed = 11
mc_draws = 50
"#;

#[test]
fn reproduce_missing_out_dir_is_a_user_error_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent");
    let o = run(&["reproduce", "fig4_example1", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=io exit=2:"), "{err}");
    assert!(!missing.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn reproduce_unknown_figure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["reproduce", "fig9", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fig9"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn reproduce_example_one_writes_both_panels() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["reproduce", "fig4_example1", tmp.path().to_str().unwrap(), "--num-seeds", "1", "--mc-draws", "0", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["fig4_imaml.svg", "fig4_maml.svg", "manifest.json", "records.csv", "summary.csv"]);

    let records = fs::read_to_string(tmp.path().join("records.csv")).unwrap();
    assert!(records.starts_with("# schema=metaover-records/1 seed=5\n"));
    // 13 N values, 4 betas, 2 methods, 1 seed
    assert_eq!(rows(&records).len(), 104);
    assert!(!records.contains("wall_time"));
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("# schema=metaover-summary/1 seed=5\n"));

    let svg = fs::read_to_string(tmp.path().join("fig4_maml.svg")).unwrap();
    assert!(svg.starts_with("<!-- schema="));
    assert!(svg.contains("seed=5"));
    assert_eq!(svg.matches("<polyline").count(), 4, "one line per beta");
    assert!(!svg.contains("href="));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema"], "metaover-manifest/1");
    assert_eq!(manifest["master_seed"], 5);
    assert_eq!(manifest["config"]["num_seeds"], 1);
    assert!(manifest["defaults_provenance"]["unstated.beta_grid"].is_string());
    assert!(manifest["library_version"].is_string());
}

#[test]
fn double_descent_chart_has_interior_peak() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["reproduce", "fig3_double_descent", tmp.path().to_str().unwrap(), "--num-seeds", "2", "--mc-draws", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let r = rows(&summary);
    // columns: cell, grid, method, hyperparameter, beta, sigma_omega, d, M, N, records, failed, excess_risk_mean
    let curve: Vec<(usize, f64)> = r
        .iter()
        .filter(|row| row[2] == "maml" && row[3].parse::<f64>().unwrap() == 0.1)
        .map(|row| (row[8].parse().unwrap(), row[11].parse().unwrap()))
        .collect();
    let peak = curve.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).unwrap().0;
    assert!(peak > 0 && peak + 1 < curve.len(), "{curve:?}");
    assert!(tmp.path().join("fig3_maml.svg").exists() && tmp.path().join("fig3_imaml.svg").exists());
}

#[test]
fn sweep_output_is_schedule_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", SMALL_SWEEP);
    let mut texts = Vec::new();
    for workers in ["1", "4"] {
        let out = tmp.path().join(format!("w{workers}"));
        fs::create_dir(&out).unwrap();
        let o = bin()
            .args(["sweep", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .env("METAOVER_WORKERS", workers)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        texts.push((
            fs::read_to_string(out.join("records.csv")).unwrap(),
            fs::read_to_string(out.join("summary.csv")).unwrap(),
        ));
        assert!(out.join("risk_maml.svg").exists() && out.join("risk_imaml.svg").exists());
    }
    assert_eq!(texts[0], texts[1]);
    let r = rows(&texts[0].0);
    assert_eq!(r.len(), 2 * 2 * 3 * 3);
    assert!(r.iter().all(|row| row.last().unwrap() == "ok"));
}

#[test]
fn sweep_uses_output_dir_from_file_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    fs::create_dir(&out).unwrap();
    let text = format!("{SMALL_SWEEP}\n[output]\ndir = {:?}\n", out.to_str().unwrap());
    let cfg = write(tmp.path(), "s.toml", &text);
    let o = run(&["sweep", cfg.to_str().unwrap(), "--seed", "99", "--c1", "2", "--mc-draws", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 99);
    assert_eq!(manifest["config"]["c1"], 2.0);
    assert!(manifest["config"]["mc"].is_null());
    assert!(fs::read_to_string(out.join("records.csv")).unwrap().starts_with("# schema=metaover-records/1 seed=99\n"));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[env]\nd = 10\ndimension = 4\n");
    let o = run(&["sweep", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));

    let cfg = write(tmp.path(), "split.toml", "[sweep]\nn = 1\n");
    let o = run(&["sweep", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["sweep", "/nonexistent/cfg.toml", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    // nothing but the inputs is left behind
    let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn analyze_example_two_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = (0..200).map(|i| if i < 20 { "1\n".to_string() } else { "0.3\n".to_string() }).collect();
    let f = write(tmp.path(), "ex2.csv", &text);
    let o = run(&["analyze", f.to_str().unwrap(), "--nm", "50", "--method", "maml", "--hyper", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = stdout(&o);
    assert_eq!(field(&rep, "r_0").parse::<f64>().unwrap(), 74.0);
    assert_eq!(field(&rep, "k_star"), "0");
    assert_eq!(field(&rep, "mu_1").parse::<f64>().unwrap(), 1.0);
    assert_eq!(field(&rep, "heterogeneity"), "undefined");
    assert_eq!(field(&rep, "hyperparameter_safe"), "true");
    assert_eq!(field(&rep, "order_preserved"), "true");
}

#[test]
fn analyze_identity_and_heterogeneity() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "id.csv", &"1\n".repeat(100));
    let g = write(tmp.path(), "id2.csv", &"1\n".repeat(100));
    let csv_out = tmp.path().join("report.csv");
    let o = run(&["analyze", f.to_str().unwrap(), g.to_str().unwrap(), "--nm", "50", "--csv", csv_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = stdout(&o);
    assert_eq!(field(&rep, "r_0/nm").parse::<f64>().unwrap(), 2.0);
    assert_eq!(field(&rep, "heterogeneity").parse::<f64>().unwrap(), 0.0);
    let saved = fs::read_to_string(csv_out).unwrap();
    assert!(saved.starts_with("# schema=metaover-analyze/1"));
    assert_eq!(rows(&saved).len(), 1);
}

#[test]
fn analyze_reports_unsafe_step() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "two.csv", "1\n0.6\n");
    let o = run(&["analyze", f.to_str().unwrap(), "--nm", "4", "--method", "maml", "--hyper", "0.4"]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "hyperparameter_safe"), "false");
    assert_eq!(field(&stdout(&o), "order_preserved"), "false");
}

#[test]
fn analyze_malformed_file_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "bad.csv", "3\n2\nx\n1\n");
    let o = run(&["analyze", f.to_str().unwrap(), "--nm", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

const SOLVE_BASE: &str = "[env]\nd = 40\nd1 = 5\nbeta = 0.5\n[sweep]\nn = 6\nm = 4\nnum_seeds = 2\nmaster_seed = 3\n";

fn solve(dir: &Path, text: &str, extra: &[&str]) -> Output {
    let cfg = write(dir, "solve.toml", text);
    let mut args = vec!["solve", cfg.to_str().unwrap()];
    args.extend(extra);
    run(&args)
}

#[test]
fn solve_noiseless_homogeneous_underparameterized() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[env]\nd = 10\nr = 0.0\nsigma = 0.0\n[sweep]\nn = 10\nm = 10\nmaster_seed = 8\n";
    let o = solve(tmp.path(), text, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# schema=metaover-solve/1 seed=8\n# config={"));
    let r = rows(&out);
    assert_eq!(r.len(), 1);
    let excess: f64 = r[0][13].parse().unwrap();
    assert!(excess <= 1e-10, "{excess}");
}

#[test]
fn solve_alpha_zero_matches_erm_bytewise() {
    let tmp = tempfile::tempdir().unwrap();
    let maml = solve(tmp.path(), &format!("{SOLVE_BASE}[method]\nkind = \"maml\"\nalpha = 0.0\n"), &[]);
    let erm = solve(tmp.path(), &format!("{SOLVE_BASE}[method]\nkind = \"erm\"\n"), &[]);
    assert!(maml.status.success() && erm.status.success());
    let (a, b) = (rows(&stdout(&maml)), rows(&stdout(&erm)));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x[2..], y[2..]);
    }
}

#[test]
fn solve_is_repeatable_and_hides_theta_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let first = stdout(&solve(tmp.path(), SOLVE_BASE, &[]));
    let second = stdout(&solve(tmp.path(), SOLVE_BASE, &[]));
    assert_eq!(first, second);
    let header = first.lines().find(|l| l.starts_with("method,")).unwrap();
    assert!(!header.split(',').any(|c| c == "theta0_hat"));

    let dumped = stdout(&solve(tmp.path(), SOLVE_BASE, &["--dump-theta"]));
    let r = rows(&dumped);
    assert_eq!(r[0].last().unwrap().split(' ').count(), 40);

    let reseeded = stdout(&solve(tmp.path(), SOLVE_BASE, &["--seed", "4"]));
    assert!(reseeded.starts_with("# schema=metaover-solve/1 seed=4\n"));
    assert_ne!(rows(&reseeded)[0][13], rows(&first)[0][13]);
}

#[test]
fn solve_writes_files_when_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    fs::create_dir(&out).unwrap();
    let o = solve(tmp.path(), SOLVE_BASE, &["--out-dir", out.to_str().unwrap(), "--mc-draws", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("solve.csv")).unwrap();
    let r = rows(&text);
    let mc_se: f64 = r[0][15].parse().unwrap();
    assert!(mc_se > 0.0);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn solve_rejects_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let o = solve(tmp.path(), "[sweep]\nn = [4, 8]\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("use sweep"));
}

#[test]
fn numeric_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    // the adapted weights overflow, so the solve cannot produce a finite answer
    let o = solve(tmp.path(), "[env]\nd = 10\n[method]\nalpha = 1e200\n[sweep]\nn = 4\nm = 2\n", &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error kind=numeric exit=1:"));
}
