use std::collections::BTreeMap;

use super::{Axis, EnvTemplate, Grid, Metric, PlotSpec, SpectrumFamily, Statistic, SweepConfig};
use crate::adaptation::MetaMethod;
use crate::error::{Error, Result};
use crate::meta_solver::Estimator;
use crate::risk::McSettings;

pub const PRESET_NAMES: [&str; 4] = ["fig3_double_descent", "fig4_example1", "fig5_example2", "fig6_lemmas"];

/// Roughly log-spaced from 2 to 200; skips `N = 40`, where `M·N_va = d`
/// exactly and the expected risk is infinite.
pub const N_GRID: [usize; 13] = [2, 3, 4, 6, 9, 13, 20, 30, 44, 66, 100, 150, 200];

const SEEDS: usize = 20;
const MASTER_SEED: u64 = 20240;

fn unstated(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
    entries.iter().map(|(k, v)| (format!("unstated.{k}"), v.to_string())).collect()
}

fn base_env(spectrum: SpectrumFamily) -> EnvTemplate {
    EnvTemplate { spectrum, r: 1.0, theta_mean_norm: 1.0, sigma_noise: 1.0, ..Default::default() }
}

fn config(name: &str, env: EnvTemplate, grids: Vec<Grid>, plots: Vec<PlotSpec>, meta: BTreeMap<String, String>) -> SweepConfig {
    SweepConfig {
        name: name.into(),
        env,
        grids,
        num_seeds: SEEDS,
        master_seed: MASTER_SEED,
        estimator: Estimator::Analytic,
        mc: Some(McSettings::new(1000, 0)),
        c1: 1.0,
        erm: Default::default(),
        rank_tol: crate::meta_solver::DEFAULT_RANK_TOL,
        workers: 0,
        plots,
        metadata: meta,
    }
}

fn risk_vs_n(file: &str, title: &str, series: Axis) -> PlotSpec {
    PlotSpec {
        file: file.into(),
        title: title.into(),
        grid: 0,
        x: Axis::N,
        series,
        y: Metric::ExcessRisk,
        statistic: Statistic::Mean,
        per_method: true,
        log_x: true,
        log_y: true,
    }
}

fn common_meta() -> Vec<(&'static str, &'static str)> {
    vec![
        ("n_grid", "2..200, roughly log-spaced, N=40 skipped"),
        ("num_seeds", "20"),
        ("r", "1"),
        ("theta_mean_norm", "1 (theta_bar = 1/sqrt(d) in every coordinate)"),
        ("sigma_noise", "1"),
    ]
}

fn fig3() -> SweepConfig {
    let methods = vec![
        MetaMethod::Maml { alpha: 0.05 },
        MetaMethod::Maml { alpha: 0.1 },
        MetaMethod::Maml { alpha: 0.3 },
        MetaMethod::Imaml { gamma: 0.1 },
        MetaMethod::Imaml { gamma: 1.0 },
        MetaMethod::Imaml { gamma: 1000.0 },
    ];
    let grid = Grid {
        label: "double_descent".into(),
        methods,
        n: N_GRID.to_vec(),
        m: vec![10],
        d: vec![200],
        beta: vec![1.0],
        sigma_omega: vec![0.0],
    };
    let mut meta = unstated(&common_meta());
    meta.extend(unstated(&[
        ("covariance", "identity"),
        ("alpha_grid", "0.05, 0.1, 0.3"),
        ("gamma_grid", "0.1, 1, 1000"),
    ]));
    meta.insert(
        "note.y_axis".into(),
        "charts show excess risk; population risk is recorded alongside it".into(),
    );
    config(
        "fig3_double_descent",
        base_env(SpectrumFamily::Spiked { d1: 0 }),
        vec![grid],
        vec![risk_vs_n("fig3", "Excess risk vs N (M=10, d=200)", Axis::Method)],
        meta,
    )
}

fn fig4() -> SweepConfig {
    let grid = Grid {
        label: "example1".into(),
        methods: vec![MetaMethod::Maml { alpha: 0.1 }, MetaMethod::Imaml { gamma: 1000.0 }],
        n: N_GRID.to_vec(),
        m: vec![10],
        d: vec![200],
        beta: vec![0.1, 0.3, 0.6, 1.0],
        sigma_omega: vec![0.0],
    };
    let mut meta = unstated(&common_meta());
    meta.extend(unstated(&[("beta_grid", "0.1, 0.3, 0.6, 1.0")]));
    config(
        "fig4_example1",
        base_env(SpectrumFamily::Spiked { d1: 20 }),
        vec![grid],
        vec![risk_vs_n("fig4", "Excess risk vs N, Q = diag(I_20, beta I_180)", Axis::Beta)],
        meta,
    )
}

fn fig5() -> SweepConfig {
    let grid = Grid {
        label: "example2".into(),
        methods: vec![MetaMethod::Maml { alpha: 0.1 }, MetaMethod::Imaml { gamma: 0.1 }],
        n: N_GRID.to_vec(),
        m: vec![10],
        d: vec![200],
        beta: vec![0.3],
        sigma_omega: vec![0.1, 0.5, 1.0],
    };
    let mut meta = unstated(&common_meta());
    meta.extend(unstated(&[("sigma_omega_grid", "0.1, 0.5, 1.0")]));
    config(
        "fig5_example2",
        base_env(SpectrumFamily::Spiked { d1: 20 }),
        vec![grid],
        vec![risk_vs_n("fig5", "Excess risk vs N, Q_m = |1+omega_m| diag(I_20, 0.3 I_180)", Axis::SigmaOmega)],
        meta,
    )
}

fn fig6() -> SweepConfig {
    let method = MetaMethod::Maml { alpha: 0.1 };
    let by_d = Grid {
        label: "variance_ratio_vs_d".into(),
        methods: vec![method],
        n: vec![10],
        m: vec![5],
        d: vec![50, 100, 200, 400, 800],
        beta: vec![1.0],
        sigma_omega: vec![0.0],
    };
    let by_m = Grid {
        label: "bias_vs_m".into(),
        methods: vec![method],
        n: vec![10],
        m: vec![1, 2, 4, 6, 8, 10, 12, 16, 20],
        d: vec![50],
        beta: vec![1.0],
        sigma_omega: vec![0.0],
    };
    let plot = |file: &str, title: &str, grid, x, y| PlotSpec {
        file: String::from(file),
        title: String::from(title),
        grid,
        x,
        series: Axis::Method,
        y,
        statistic: Statistic::Median,
        per_method: false,
        log_x: true,
        log_y: true,
    };
    let mut meta = unstated(&[
        ("method", "MAML alpha=0.1"),
        ("covariance", "diag(I_5, beta I_{d-5}) with beta*(d-5) = 5, so the trace stays fixed as d grows"),
        ("d_grid", "50, 100, 200, 400, 800"),
        ("m_grid", "1..20 at d=50; underparameterized from M=10"),
        ("num_seeds", "20"),
        ("r", "1"),
        ("theta_mean_norm", "1"),
        ("sigma_noise", "1"),
    ]);
    meta.insert("note.stated".into(), "M=5, s=0.5, N=10".into());
    config(
        "fig6_lemmas",
        base_env(SpectrumFamily::FixedTailTrace { d1: 5, tail_trace: 5.0 }),
        vec![by_d, by_m],
        vec![
            plot("fig6a", "Cross-task / per-task variance vs d (M=5, N=10)", 0, Axis::D, Metric::VarianceRatio),
            plot("fig6b", "Bias vs M (N=10, d=50)", 1, Axis::M, Metric::Bias),
        ],
        meta,
    )
}

/// Sweep configuration for one of the named simulation studies. Values
/// the study description leaves open are recorded in `metadata` under
/// `unstated.*`.
pub fn preset(name: &str) -> Result<SweepConfig> {
    match name {
        "fig3_double_descent" => Ok(fig3()),
        "fig4_example1" => Ok(fig4()),
        "fig5_example2" => Ok(fig5()),
        "fig6_lemmas" => Ok(fig6()),
        other => Err(Error::UnknownPreset(other.into())),
    }
}
