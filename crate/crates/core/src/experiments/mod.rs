//! Seeded parameter sweeps and the figure presets built on them.

mod aggregate;
mod presets;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, summarize, CellSummary, Summary};
pub use presets::{preset, PRESET_NAMES};

use crate::adaptation::{ErmConvention, MetaMethod};
use crate::error::{Error, Result};
use crate::meta_solver::{min_norm_solve, population_solution, Estimator, PopulationSolution, SolveOptions, DEFAULT_RANK_TOL};
use crate::risk::{decompose, excess_risk, theorem_bound, with_workers, McSettings};
use crate::rng::{StreamKey, StreamTag};
use crate::spectrum::{heterogeneity, SpectrumReport, DEFAULT_C1};
use crate::task_model::{sample_meta_dataset, CovarianceSpec, MetaDataset, SubGaussianFamily, TaskEnvironment};

/// Tag written into every record and output header.
pub const SCHEMA_VERSION: &str = "metaover-sweep/1";

/// Spectrum family of the swept covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumFamily {
    /// `diag(I_{d1}, β I_{d−d1})` with `β` taken from the grid.
    Spiked { d1: usize },
    /// `diag(I_{d1}, β I_{d−d1})` with `β = tail_trace / (d − d1)`, so the
    /// trace stays bounded as `d` grows. The grid's `β` values are ignored.
    FixedTailTrace { d1: usize, tail_trace: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvTemplate {
    pub spectrum: SpectrumFamily,
    pub r: f64,
    pub theta_mean_norm: f64,
    pub sigma_noise: f64,
    pub split: f64,
    #[serde(default)]
    pub rotation_seed: Option<u64>,
    #[serde(default)]
    pub family: SubGaussianFamily,
}

impl Default for EnvTemplate {
    fn default() -> Self {
        Self {
            spectrum: SpectrumFamily::Spiked { d1: 0 },
            r: 1.0,
            theta_mean_norm: 1.0,
            sigma_noise: 1.0,
            split: 0.5,
            rotation_seed: None,
            family: SubGaussianFamily::Gaussian,
        }
    }
}

impl EnvTemplate {
    /// The `β` actually used at dimension `d`.
    pub fn beta_at(&self, d: usize, beta: f64) -> f64 {
        match self.spectrum {
            SpectrumFamily::Spiked { .. } => beta,
            SpectrumFamily::FixedTailTrace { d1, tail_trace } => tail_trace / d.saturating_sub(d1).max(1) as f64,
        }
    }

    pub fn build(&self, d: usize, beta: f64, sigma_omega: f64) -> Result<TaskEnvironment> {
        let d1 = match self.spectrum {
            SpectrumFamily::Spiked { d1 } | SpectrumFamily::FixedTailTrace { d1, .. } => d1,
        };
        let beta = self.beta_at(d, beta);
        let mut cov = if sigma_omega > 0.0 {
            CovarianceSpec::scaled_spiked(d, d1, beta, sigma_omega)
        } else {
            CovarianceSpec::spiked(d, d1, beta)
        };
        if let Some(seed) = self.rotation_seed {
            cov = cov.rotated(seed);
        }
        let env = TaskEnvironment::new(cov)
            .with_r(self.r)
            .with_sigma(self.sigma_noise)
            .with_split(self.split)
            .with_family(self.family)
            .with_theta_mean_norm(self.theta_mean_norm);
        env.validate()?;
        Ok(env)
    }
}

fn default_beta() -> Vec<f64> {
    vec![1.0]
}

fn default_sigma_omega() -> Vec<f64> {
    vec![0.0]
}

/// Cartesian block of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub label: String,
    pub methods: Vec<MetaMethod>,
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub d: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "default_sigma_omega")]
    pub sigma_omega: Vec<f64>,
}

/// Quantity extracted from a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExcessRisk,
    ExcessMc,
    PopulationRisk,
    CrossTaskVariance,
    Bias,
    PerTaskVariance,
    VarianceRatio,
    Bound,
    HeterogeneityQ,
    HeterogeneityW,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::ExcessRisk,
        Metric::ExcessMc,
        Metric::PopulationRisk,
        Metric::CrossTaskVariance,
        Metric::Bias,
        Metric::PerTaskVariance,
        Metric::VarianceRatio,
        Metric::Bound,
        Metric::HeterogeneityQ,
        Metric::HeterogeneityW,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::ExcessRisk => "excess_risk",
            Metric::ExcessMc => "excess_mc",
            Metric::PopulationRisk => "population_risk",
            Metric::CrossTaskVariance => "cross_task_variance",
            Metric::Bias => "bias",
            Metric::PerTaskVariance => "per_task_variance",
            Metric::VarianceRatio => "variance_ratio",
            Metric::Bound => "bound",
            Metric::HeterogeneityQ => "heterogeneity_q",
            Metric::HeterogeneityW => "heterogeneity_w",
        }
    }

    pub fn of(&self, r: &SweepRecord) -> f64 {
        match self {
            Metric::ExcessRisk => r.excess_risk,
            Metric::ExcessMc => r.excess_mc,
            Metric::PopulationRisk => r.population_risk,
            Metric::CrossTaskVariance => r.cross_task_variance,
            Metric::Bias => r.bias,
            Metric::PerTaskVariance => r.per_task_variance,
            Metric::VarianceRatio => r.cross_task_variance / r.per_task_variance,
            Metric::Bound => r.bound,
            Metric::HeterogeneityQ => r.heterogeneity_q,
            Metric::HeterogeneityW => r.heterogeneity_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    N,
    D,
    M,
    Beta,
    SigmaOmega,
    Method,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::N => "N",
            Axis::D => "d",
            Axis::M => "M",
            Axis::Beta => "beta",
            Axis::SigmaOmega => "sigma_omega",
            Axis::Method => "method",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[default]
    Mean,
    Median,
}

/// One chart (or one chart per method when `per_method` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub file: String,
    pub title: String,
    pub grid: usize,
    pub x: Axis,
    pub series: Axis,
    pub y: Metric,
    #[serde(default)]
    pub statistic: Statistic,
    #[serde(default)]
    pub per_method: bool,
    #[serde(default)]
    pub log_x: bool,
    #[serde(default)]
    pub log_y: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub name: String,
    pub env: EnvTemplate,
    pub grids: Vec<Grid>,
    pub num_seeds: usize,
    pub master_seed: u64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    /// Monte-Carlo check of the excess risk; `None` skips it.
    #[serde(default)]
    pub mc: Option<McSettings>,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default)]
    pub erm: ErmConvention,
    #[serde(default = "default_tol")]
    pub rank_tol: f64,
    /// 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub plots: Vec<PlotSpec>,
    /// Free-form provenance notes, e.g. which values the sweep had to choose.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn default_estimator() -> Estimator {
    Estimator::Analytic
}

fn default_c1() -> f64 {
    DEFAULT_C1
}

fn default_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl SweepConfig {
    /// A single-grid sweep with default settings.
    pub fn new(name: &str, env: EnvTemplate, grid: Grid) -> Self {
        Self {
            name: name.into(),
            env,
            grids: vec![grid],
            num_seeds: 1,
            master_seed: 0,
            estimator: Estimator::Analytic,
            mc: None,
            c1: DEFAULT_C1,
            erm: ErmConvention::Validation,
            rank_tol: DEFAULT_RANK_TOL,
            workers: 0,
            plots: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Every cell, in a fixed order: grid, method, β, σ_ω, d, M, N.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (gi, g) in self.grids.iter().enumerate() {
            for &method in &g.methods {
                for &beta in &g.beta {
                    for &sigma_omega in &g.sigma_omega {
                        for &d in &g.d {
                            for &m in &g.m {
                                for &n in &g.n {
                                    out.push(Cell {
                                        index: out.len(),
                                        grid: gi,
                                        method,
                                        beta: self.env.beta_at(d, beta),
                                        sigma_omega,
                                        d,
                                        m,
                                        n,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_seeds == 0 {
            return bad("num_seeds must be at least 1".into());
        }
        if self.grids.is_empty() {
            return bad("at least one grid is required".into());
        }
        if !(self.c1 >= 1.0) {
            return bad(format!("c1 must be >= 1, got {}", self.c1));
        }
        if let Some(mc) = &self.mc {
            if mc.draws < 2 {
                return bad("mc.draws must be at least 2".into());
            }
        }
        if let SpectrumFamily::FixedTailTrace { tail_trace, .. } = self.env.spectrum {
            if !(tail_trace > 0.0) {
                return bad(format!("tail_trace must be positive, got {tail_trace}"));
            }
        }
        for g in &self.grids {
            let axes = [
                ("methods", g.methods.len()),
                ("n", g.n.len()),
                ("m", g.m.len()),
                ("d", g.d.len()),
                ("beta", g.beta.len()),
                ("sigma_omega", g.sigma_omega.len()),
            ];
            if let Some((axis, _)) = axes.iter().find(|(_, len)| *len == 0) {
                return bad(format!("grid '{}' has an empty {axis} axis", g.label));
            }
            if g.m.contains(&0) {
                return bad(format!("grid '{}': M must be positive", g.label));
            }
        }
        for p in &self.plots {
            if p.grid >= self.grids.len() {
                return bad(format!("plot '{}' refers to grid {} of {}", p.file, p.grid, self.grids.len()));
            }
        }
        for cell in self.cells() {
            let ctx = |e: Error| Error::InvalidConfig(format!("{cell}: {e}"));
            cell.method.validate().map_err(ctx)?;
            if let SpectrumFamily::FixedTailTrace { d1, .. } = self.env.spectrum {
                if cell.d <= d1 {
                    return bad(format!("{cell}: d must exceed d1 = {d1}"));
                }
            }
            let env = self.env.build(cell.d, cell.beta, cell.sigma_omega).map_err(ctx)?;
            env.split_sizes(cell.n).map_err(ctx)?;
        }
        Ok(())
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub grid: usize,
    pub method: MetaMethod,
    pub beta: f64,
    pub sigma_omega: f64,
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

impl Cell {
    pub fn coordinate(&self, axis: Axis) -> f64 {
        match axis {
            Axis::N => self.n as f64,
            Axis::D => self.d as f64,
            Axis::M => self.m as f64,
            Axis::Beta => self.beta,
            Axis::SigmaOmega => self.sigma_omega,
            Axis::Method => self.method.hyperparameter().unwrap_or(f64::NAN),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cell {} ({}, beta={}, sigma_omega={}, d={}, M={}, N={})",
            self.index, self.method, self.beta, self.sigma_omega, self.d, self.m, self.n
        )
    }
}

/// Result for one (cell, seed). Failed runs keep NaN metrics and the reason in `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema: String,
    pub cell: Cell,
    pub seed_index: usize,
    pub seed: u64,
    pub rank: usize,
    pub excess_risk: f64,
    pub excess_mc: f64,
    pub mc_stderr: f64,
    pub population_risk: f64,
    pub cross_task_variance: f64,
    pub bias: f64,
    pub per_task_variance: f64,
    pub trace_c1: f64,
    pub trace_c2: f64,
    pub bound: f64,
    pub r0: f64,
    pub k_star: Option<usize>,
    pub big_r_kstar: f64,
    pub heterogeneity_q: f64,
    pub heterogeneity_w: f64,
    /// Seconds; excluded from the CSV so outputs stay schedule-invariant.
    pub wall_time: f64,
    pub status: String,
}

impl SweepRecord {
    fn failed(cell: Cell, seed_index: usize, seed: u64, reason: String) -> Self {
        Self {
            schema: SCHEMA_VERSION.into(),
            cell,
            seed_index,
            seed,
            rank: 0,
            excess_risk: f64::NAN,
            excess_mc: f64::NAN,
            mc_stderr: f64::NAN,
            population_risk: f64::NAN,
            cross_task_variance: f64::NAN,
            bias: f64::NAN,
            per_task_variance: f64::NAN,
            trace_c1: f64::NAN,
            trace_c2: f64::NAN,
            bound: f64::NAN,
            r0: f64::NAN,
            k_star: None,
            big_r_kstar: f64::NAN,
            heterogeneity_q: f64::NAN,
            heterogeneity_w: f64::NAN,
            wall_time: 0.0,
            status: reason,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<SweepRecord>,
    pub summaries: Vec<CellSummary>,
    pub wall_time: f64,
}

/// Data stream for seed `s`. It does not depend on the cell, so every cell
/// sees the same underlying draws for a given seed (common random numbers).
pub fn seed_key(master_seed: u64, seed_index: usize) -> StreamKey {
    StreamKey::new(master_seed).child(seed_index as u64)
}

struct CellContext {
    env: TaskEnvironment,
    pop: PopulationSolution,
    report: SpectrumReport,
}

fn prepare_cell(config: &SweepConfig, cell: &Cell) -> Result<CellContext> {
    let env = config.env.build(cell.d, cell.beta, cell.sigma_omega)?;
    let pop = population_solution(cell.method, &env, config.estimator)?;
    let report = SpectrumReport::new(pop.mean_weight.eigvals.iter().copied().collect())?
        .with_sample_size(cell.n * cell.m, config.c1)?;
    Ok(CellContext { env, pop, report })
}

fn task_heterogeneity(dataset: &MetaDataset, method: MetaMethod) -> Result<(f64, f64)> {
    let q: Vec<Vec<f64>> = dataset.tasks.iter().map(|t| t.covariance.eigvals.iter().copied().collect()).collect();
    let w: Vec<Vec<f64>> = q.iter().map(|s| s.iter().map(|&l| method.map_eigenvalue(l)).collect()).collect();
    Ok((heterogeneity(&q)?, heterogeneity(&w)?))
}

fn run_one(config: &SweepConfig, cell: &Cell, ctx: &CellContext, seed_index: usize) -> SweepRecord {
    let key = seed_key(config.master_seed, seed_index);
    let seed = key.fingerprint();
    let start = Instant::now();
    let result = (|| -> Result<SweepRecord> {
        let dataset = sample_meta_dataset(&ctx.env, cell.m, cell.n, &key)?;
        let opts = SolveOptions { tol: config.rank_tol, erm: config.erm };
        let sol = min_norm_solve(cell.method, &dataset, &opts)?;
        let (excess_mc, mc_stderr, population_risk, excess) = match config.mc {
            Some(mc) => {
                let mc = McSettings { seed: key.tagged(StreamTag::MonteCarlo).fingerprint(), workers: 0, ..mc };
                let rep = excess_risk(&sol, &ctx.pop, &ctx.env, mc)?;
                (rep.excess_via_mc, rep.mc_stderr, rep.population_risk, rep.excess_via_quadratic)
            }
            None => {
                let w = &ctx.pop.mean_weight;
                let delta = &sol.theta0_hat - &ctx.pop.theta0_star;
                let pr = w.quad_form(&(&sol.theta0_hat - &ctx.env.theta_mean))
                    + ctx.env.r * ctx.env.r / cell.d as f64 * w.trace();
                (f64::NAN, f64::NAN, pr, w.quad_form(&delta))
            }
        };
        let dec = decompose(&dataset, &sol, &ctx.pop)?;
        let (v_q, v_w) = task_heterogeneity(&dataset, cell.method)?;
        let bound = theorem_bound(
            &ctx.report.clone().with_heterogeneity(v_w),
            ctx.env.theta_mean.norm(),
            ctx.env.sigma_noise,
        )?;
        Ok(SweepRecord {
            schema: SCHEMA_VERSION.into(),
            cell: *cell,
            seed_index,
            seed,
            rank: sol.rank,
            excess_risk: excess,
            excess_mc,
            mc_stderr,
            population_risk,
            cross_task_variance: dec.cross_task_variance,
            bias: dec.bias,
            per_task_variance: dec.per_task_variance,
            trace_c1: dec.trace_c1,
            trace_c2: dec.trace_c2,
            bound: bound.total,
            r0: ctx.report.r0().unwrap_or(f64::NAN),
            k_star: ctx.report.k_star,
            big_r_kstar: ctx.report.big_r_at_k_star().unwrap_or(f64::NAN),
            heterogeneity_q: v_q,
            heterogeneity_w: v_w,
            wall_time: 0.0,
            status: "ok".into(),
        })
    })();
    let mut rec = result.unwrap_or_else(|e| SweepRecord::failed(*cell, seed_index, seed, e.to_string()));
    rec.wall_time = start.elapsed().as_secs_f64();
    rec
}

/// Run every (cell, seed) pair. Per-cell failures are recorded, never
/// propagated; only an invalid configuration is an error.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput> {
    config.validate()?;
    let start = Instant::now();
    let cells = config.cells();
    let records = with_workers(config.workers, || {
        let contexts: Vec<std::result::Result<CellContext, String>> = cells
            .par_iter()
            .map(|c| prepare_cell(config, c).map_err(|e| e.to_string()))
            .collect();
        let items: Vec<(usize, usize)> =
            (0..cells.len()).flat_map(|c| (0..config.num_seeds).map(move |s| (c, s))).collect();
        items
            .par_iter()
            .map(|&(c, s)| match &contexts[c] {
                Ok(ctx) => run_one(config, &cells[c], ctx, s),
                Err(reason) => {
                    SweepRecord::failed(cells[c], s, seed_key(config.master_seed, s).fingerprint(), reason.clone())
                }
            })
            .collect::<Vec<_>>()
    })?;
    let summaries = aggregate(&records);
    Ok(SweepOutput { records, summaries, wall_time: start.elapsed().as_secs_f64() })
}
