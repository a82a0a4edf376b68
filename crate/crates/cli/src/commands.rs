use std::collections::BTreeMap;
use std::path::Path;

use metaover::experiments::{preset, run_sweep, seed_key, Axis, Cell, PlotSpec, Statistic, SweepConfig, SweepOutput, PRESET_NAMES};
use metaover::spectrum::parse_spectrum_csv;
use metaover::stats::fmt_f64;
use metaover::{
    decompose, excess_risk, heterogeneity, hyperparameter_safe, min_norm_solve, order_preserved, population_solution,
    sample_meta_dataset, McSettings, MetaMethod, SolveOptions, SpectrumReport, StreamTag,
};
use serde::Serialize;

use crate::config::{CliConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::output::{header_line, method_name, records_csv, summary_csv, table_csv, Staging};
use crate::svg::{self, Chart, Series};

pub const MANIFEST_SCHEMA: &str = "metaover-manifest/1";
pub const SOLVE_SCHEMA: &str = "metaover-solve/1";
pub const ANALYZE_SCHEMA: &str = "metaover-analyze/1";

#[derive(Serialize)]
struct Manifest<'a> {
    schema: &'a str,
    master_seed: u64,
    library_version: &'a str,
    command: &'a str,
    records: usize,
    failed_records: usize,
    files: Vec<String>,
    /// Values the configuration filled in because the source did not state them.
    defaults_provenance: BTreeMap<String, String>,
    config: &'a SweepConfig,
}

fn manifest(command: &str, config: &SweepConfig, out: Option<&SweepOutput>, files: Vec<String>) -> CliResult<String> {
    let m = Manifest {
        schema: MANIFEST_SCHEMA,
        master_seed: config.master_seed,
        library_version: metaover::VERSION,
        command,
        records: out.map_or(0, |o| o.records.len()),
        failed_records: out.map_or(0, |o| o.records.iter().filter(|r| !r.ok()).count()),
        files,
        defaults_provenance: config.metadata.clone(),
        config,
    };
    serde_json::to_string_pretty(&m)
        .map(|s| s + "\n")
        .map_err(|e| CliError::internal("io", e.to_string()))
}

fn axis_label(axis: Axis, cell: &Cell) -> String {
    match (axis, cell.method) {
        (Axis::Method, MetaMethod::Maml { .. }) => "alpha".into(),
        (Axis::Method, MetaMethod::Imaml { .. }) => "gamma".into(),
        (Axis::Method, MetaMethod::Erm) => "erm".into(),
        _ => axis.name().into(),
    }
}

fn series_label(cell: &Cell, axes: &[Axis], mixed_methods: bool) -> String {
    let mut parts: Vec<String> = Vec::new();
    if mixed_methods {
        parts.push(cell.method.to_string());
    }
    for &a in axes {
        if a == Axis::Method {
            if mixed_methods {
                continue;
            }
            match cell.method.hyperparameter() {
                Some(h) => parts.push(format!("{}={h}", axis_label(a, cell))),
                None => parts.push(cell.method.to_string()),
            }
        } else {
            parts.push(format!("{}={}", a.name(), cell.coordinate(a)));
        }
    }
    if parts.is_empty() {
        cell.method.to_string()
    } else {
        parts.join(", ")
    }
}

/// One chart per plot spec, or per method family when `per_method` is set.
/// Series are the distinct values of every varying axis other than `x`,
/// led by the spec's own series axis.
pub fn charts(config: &SweepConfig, out: &SweepOutput) -> Vec<(String, Chart)> {
    let mut result = Vec::new();
    for spec in &config.plots {
        let cells: Vec<_> = out.summaries.iter().filter(|s| s.cell.grid == spec.grid).collect();
        let mut families: Vec<&str> = Vec::new();
        for s in &cells {
            let f = method_name(s.cell.method);
            if !families.contains(&f) {
                families.push(f);
            }
        }
        let panels: Vec<Option<&str>> =
            if spec.per_method { families.iter().map(|f| Some(*f)).collect() } else { vec![None] };
        for panel in panels {
            let members: Vec<_> =
                cells.iter().filter(|s| panel.is_none_or(|f| method_name(s.cell.method) == f)).collect();
            result.push(panel_chart(spec, panel, &members));
        }
    }
    result
}

fn panel_chart(spec: &PlotSpec, panel: Option<&str>, members: &[&&metaover::experiments::CellSummary]) -> (String, Chart) {
    let varies = |a: Axis| {
        let mut seen: Vec<u64> = Vec::new();
        for s in members {
            let v = s.cell.coordinate(a).to_bits();
            if !seen.contains(&v) {
                seen.push(v);
            }
        }
        seen.len() > 1
    };
    let mixed_methods = members.iter().any(|s| method_name(s.cell.method) != method_name(members[0].cell.method));
    let mut axes = vec![spec.series];
    for a in [Axis::Method, Axis::Beta, Axis::SigmaOmega, Axis::D, Axis::M, Axis::N] {
        if !axes.contains(&a) {
            axes.push(a);
        }
    }
    axes.retain(|a| *a != spec.x && varies(*a));

    let mut series: Vec<Series> = Vec::new();
    for s in members {
        let label = series_label(&s.cell, &axes, mixed_methods);
        let st = s.get(spec.y);
        let y = match spec.statistic {
            Statistic::Mean => st.mean,
            Statistic::Median => st.median,
        };
        let point = (s.cell.coordinate(spec.x), y, st.stderr);
        match series.iter_mut().find(|x| x.label == label) {
            Some(x) => x.points.push(point),
            None => series.push(Series { label, points: vec![point] }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let (file, title) = match panel {
        Some(f) => (format!("{}_{f}.svg", spec.file), format!("{} ({f})", spec.title)),
        None => (format!("{}.svg", spec.file), spec.title.clone()),
    };
    let stat = match spec.statistic {
        Statistic::Mean => "mean",
        Statistic::Median => "median",
    };
    let chart = Chart {
        title,
        x_label: spec.x.name().into(),
        y_label: format!("{} {} ± stderr", stat, spec.y.name()),
        log_x: spec.log_x,
        log_y: spec.log_y,
        series,
    };
    (file, chart)
}

/// Run a sweep and write records, summary, charts and manifest.
fn run_and_write(command: &str, config: &SweepConfig, out_dir: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    // fail before any work if the destination is unusable
    let mut staging = Staging::new(out_dir)?;
    let out = run_sweep(config)?;
    let failed = out.records.iter().filter(|r| !r.ok()).count();
    if failed == out.records.len() {
        let reason = out.records.first().map(|r| r.status.clone()).unwrap_or_default();
        return Err(CliError::internal("numeric", format!("every run failed; first reason: {reason}")));
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} runs failed; see the status column", out.records.len());
    }
    let seed = config.master_seed;
    staging.add("records.csv", &records_csv(&out.records, seed)?)?;
    staging.add("summary.csv", &summary_csv(&out.summaries, seed)?)?;
    let comment = format!("schema={} seed={seed}", crate::output::SUMMARY_SCHEMA);
    for (file, chart) in charts(config, &out) {
        staging.add(&file, &svg::render(&chart, &comment))?;
    }
    let mut files = staging.files().to_vec();
    files.push("manifest.json".into());
    staging.add("manifest.json", &manifest(command, config, Some(&out), files)?)?;
    staging.commit()
}

pub fn reproduce(figure: &str, out_dir: &Path, overrides: &Overrides) -> CliResult<()> {
    let mut config = preset(figure).map_err(|_| {
        CliError::user("config", format!("unknown figure '{figure}' (expected one of {})", PRESET_NAMES.join(", ")))
    })?;
    overrides.apply(&mut config);
    for path in run_and_write("reproduce", &config, out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn sweep(config_path: &Path, out_dir: Option<&Path>, overrides: &Overrides) -> CliResult<()> {
    let file = CliConfig::load(config_path)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| file.output.dir.clone())
        .ok_or_else(|| CliError::user("config", "no output directory: pass --out-dir or set output.dir"))?;
    let mut config = file.to_sweep(overrides)?;
    config.metadata.insert("source".into(), config_path.display().to_string());
    for path in run_and_write("sweep", &config, &dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

/// Analysis of spectra read from files.
pub struct AnalyzeArgs<'a> {
    pub spectra: &'a [std::path::PathBuf],
    pub nm: usize,
    pub c1: f64,
    pub method: Option<MetaMethod>,
    pub csv: Option<&'a Path>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "undefined".into())
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult<String> {
    let mut spectra = Vec::new();
    for path in args.spectra {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user("io", format!("cannot read {}: {e}", path.display())))?;
        let s = parse_spectrum_csv(&text).map_err(|e| CliError::user("parse", format!("{}: {e}", path.display())))?;
        spectra.push(s);
    }
    let d = spectra[0].len();
    if let Some(bad) = spectra.iter().position(|s| s.len() != d) {
        return Err(CliError::user(
            "parse",
            format!("{} has {} eigenvalues, expected {d}", args.spectra[bad].display(), spectra[bad].len()),
        ));
    }
    // several spectra are summarized by their index-wise mean
    let mean: Vec<f64> = (0..d).map(|i| spectra.iter().map(|s| s[i]).sum::<f64>() / spectra.len() as f64).collect();
    let v = if spectra.len() > 1 { Some(heterogeneity(&spectra)?) } else { None };
    let mut report = SpectrumReport::new(mean.clone())?.with_sample_size(args.nm, args.c1)?;
    if let Some(v) = v {
        report = report.with_heterogeneity(v);
    }
    let (b0, b1, b2) = report.benign_ratios().expect("sample size was set");
    let mut fields: Vec<(&str, String)> = vec![
        ("spectra", spectra.len().to_string()),
        ("d", d.to_string()),
        ("nm", args.nm.to_string()),
        ("c1", fmt_f64(args.c1)),
        ("mu_1", fmt_f64(report.op_norm)),
        ("trace", fmt_f64(report.trace)),
        ("r_0", opt(report.r0())),
        ("k_star", report.k_star.map(|k| k.to_string()).unwrap_or_else(|| "undefined".into())),
        ("R_k_star", opt(report.big_r_at_k_star())),
        ("r_0/nm", opt(b0)),
        ("k_star/nm", opt(b1)),
        ("nm/R_k_star", opt(b2)),
        ("heterogeneity", opt(v)),
    ];
    if let Some(m) = args.method {
        m.validate()?;
        fields.push(("method", m.to_string()));
        fields.push(("hyperparameter_safe", hyperparameter_safe(m, report.op_norm)?.to_string()));
        fields.push(("order_preserved", order_preserved(m, &mean).to_string()));
    }
    let text: String = fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    if let Some(path) = args.csv {
        let rows = vec![
            fields.iter().map(|(k, _)| k.to_string()).collect(),
            fields.iter().map(|(_, v)| v.clone()).collect(),
        ];
        let body = table_csv(ANALYZE_SCHEMA, 0, rows)?;
        write_file_atomic(path, &body)?;
    }
    Ok(text)
}

/// Write `path` through a sibling temporary file and a rename.
fn write_file_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut staging = Staging::new(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| CliError::user("io", "bad output file name"))?;
    staging.add(name, contents)?;
    staging.commit()?;
    Ok(())
}

/// Solve every seed of a single-cell configuration. Returns the CSV text.
pub fn solve(config_path: &Path, out_dir: Option<&Path>, dump_theta: bool, overrides: &Overrides) -> CliResult<String> {
    let file = CliConfig::load(config_path)?;
    let dir = out_dir.map(Path::to_path_buf).or_else(|| file.output.dir.clone());
    let mut staging = dir.as_deref().map(Staging::new).transpose()?;
    let mut config = file.to_sweep(overrides)?;
    config.plots.clear();
    config.validate()?;
    let cells = config.cells();
    let [cell] = cells.as_slice() else {
        return Err(CliError::user(
            "config",
            format!("solve takes a single configuration but this one spans {} grid cells; use sweep", cells.len()),
        ));
    };
    let env = config.env.build(cell.d, cell.beta, cell.sigma_omega)?;
    let pop = population_solution(cell.method, &env, config.estimator)?;
    let opts = SolveOptions { tol: config.rank_tol, erm: config.erm };

    let mut head: Vec<String> = [
        "method",
        "hyperparameter",
        "seed_index",
        "seed",
        "d",
        "M",
        "N",
        "rank",
        "interpolates",
        "train_loss",
        "theta0_hat_norm",
        "theta0_norm",
        "distance_to_theta0",
        "excess_risk",
        "excess_mc",
        "mc_stderr",
        "population_risk",
        "cross_task_variance",
        "bias",
        "per_task_variance",
        "trace_c1",
        "trace_c2",
    ]
    .map(String::from)
    .to_vec();
    if dump_theta {
        head.push("theta0_hat".into());
    }
    let mut rows = vec![head];
    for s in 0..config.num_seeds {
        let key = seed_key(config.master_seed, s);
        let dataset = sample_meta_dataset(&env, cell.m, cell.n, &key)?;
        let sol = min_norm_solve(cell.method, &dataset, &opts)?;
        let dec = decompose(&dataset, &sol, &pop)?;
        let (excess, excess_mc, mc_se, pop_risk) = match config.mc {
            Some(mc) => {
                let mc = McSettings { seed: key.tagged(StreamTag::MonteCarlo).fingerprint(), ..mc };
                let rep = excess_risk(&sol, &pop, &env, mc)?;
                (rep.excess_via_quadratic, rep.excess_via_mc, rep.mc_stderr, rep.population_risk)
            }
            None => {
                let w = &pop.mean_weight;
                let delta = &sol.theta0_hat - &pop.theta0_star;
                let pr = w.quad_form(&(&sol.theta0_hat - &env.theta_mean)) + env.r * env.r / cell.d as f64 * w.trace();
                (w.quad_form(&delta), f64::NAN, f64::NAN, pr)
            }
        };
        let mut row = vec![
            method_name(cell.method).to_string(),
            cell.method.hyperparameter().map(fmt_f64).unwrap_or_default(),
            s.to_string(),
            key.fingerprint().to_string(),
            cell.d.to_string(),
            cell.m.to_string(),
            cell.n.to_string(),
            sol.rank.to_string(),
            sol.interpolates().to_string(),
        ];
        row.extend(
            [
                sol.train_loss,
                sol.theta0_hat.norm(),
                pop.theta0_star.norm(),
                (&sol.theta0_hat - &pop.theta0_star).norm(),
                excess,
                excess_mc,
                mc_se,
                pop_risk,
                dec.cross_task_variance,
                dec.bias,
                dec.per_task_variance,
                dec.trace_c1,
                dec.trace_c2,
            ]
            .map(fmt_f64),
        );
        if dump_theta {
            row.push(sol.theta0_hat.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "));
        }
        rows.push(row);
    }
    let body = table_csv(SOLVE_SCHEMA, config.master_seed, rows)?;
    let resolved = serde_json::to_string(&config).map_err(|e| CliError::internal("io", e.to_string()))?;
    let text = match staging.as_mut() {
        Some(st) => {
            st.add("solve.csv", &body)?;
            let files = vec!["solve.csv".to_string(), "manifest.json".to_string()];
            st.add("manifest.json", &manifest("solve", &config, None, files)?)?;
            body
        }
        None => {
            // without an output directory the resolved configuration rides along as a comment
            let mut lines = body.splitn(2, '\n');
            let first = lines.next().unwrap_or_default();
            format!("{first}\n# config={resolved}\n{}", lines.next().unwrap_or_default())
        }
    };
    if let Some(st) = staging {
        for p in st.commit()? {
            eprintln!("{}", p.display());
        }
    }
    debug_assert!(text.starts_with(&header_line(SOLVE_SCHEMA, config.master_seed)));
    Ok(text)
}
