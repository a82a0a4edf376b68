//! Population risk, excess risk, its three-way decomposition and the
//! effective-rank upper bound.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_on, MetaMethod};
use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::meta_solver::{population_solution, weighted_task_draws, Estimator, MinNormSolution, PopulationSolution};
use crate::rng::{StreamKey, StreamTag};
use crate::spectrum::SpectrumReport;
use crate::stats::{mean, sample_stderr};
use crate::task_model::{
    sample_features, sample_theta_star, CovarianceSampler, MetaDataset, Rotation, SpectralMatrix, TaskEnvironment,
};

/// Monte-Carlo settings. `workers = 0` runs on the ambient rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSettings {
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        Self { draws: 4000, seed: 0x5eed, workers: 0 }
    }
}

impl McSettings {
    pub fn new(draws: usize, seed: u64) -> Self {
        Self { draws, seed, workers: 0 }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    fn check(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::InvalidConfig(format!("Monte-Carlo needs at least 2 draws, got {}", self.draws)));
        }
        Ok(())
    }
}

/// Run `f` on a pool of `workers` threads, or on the current pool when 0.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

impl McEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        Self { mean: mean(xs), stderr: sample_stderr(xs), draws: xs.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    /// `E_m[‖θ̂0 − θ*_m‖²_{W_m}]`, without the noise floor.
    pub population_risk: f64,
    pub excess_risk: f64,
    /// `‖θ̂0 − θ0‖²_W`
    pub excess_via_quadratic: f64,
    /// Monte-Carlo estimate of `R(θ̂0) − R(θ0)` on shared task draws.
    pub excess_via_mc: f64,
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub cross_task_variance: f64,
    pub bias: f64,
    /// `σ²(Tr C1 + Tr C2)`
    pub per_task_variance: f64,
    pub trace_c1: f64,
    pub trace_c2: f64,
    /// Numerical rank of the effective design.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bias_term: f64,
    pub variance_term: f64,
    pub heterogeneity_factor: f64,
    /// `bias_term + variance_term · heterogeneity_factor`; infinite when `k*` is undefined.
    pub total: f64,
    pub k_star_defined: bool,
}

fn check_len(theta: &DVector<f64>, d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    Ok(())
}

/// `Σ_i w_i v_i²`
fn weighted_sq(w: &DVector<f64>, v: &DVector<f64>) -> f64 {
    crate::linalg::compensated_sum(w.iter().zip(v.iter()).map(|(w, v)| w * v * v))
}

/// `R(θ) = E_m[(θ − θ*_m)ᵀ W_m (θ − θ*_m)]`.
pub fn population_risk(theta: &DVector<f64>, method: MetaMethod, env: &TaskEnvironment, estimator: Estimator) -> Result<f64> {
    check_len(theta, env.dim())?;
    match estimator {
        Estimator::Analytic => {
            let pop = population_solution(method, env, Estimator::Analytic)?;
            let w = &pop.mean_weight;
            let d = env.dim() as f64;
            // θ*_m = θ̄ + (R/√d) g is independent of W_m
            Ok(w.quad_form(&(theta - &env.theta_mean)) + env.r * env.r / d * w.trace())
        }
        Estimator::MonteCarlo { num_tasks, seed } => {
            let (rotation, draws) = weighted_task_draws(method, env, num_tasks, seed)?;
            let t = rotation.apply_transpose(theta);
            let xs: Vec<f64> = draws.iter().map(|dr| weighted_sq(&dr.w, &(&t - &dr.u))).collect();
            Ok(mean(&xs))
        }
    }
}

/// Excess risk of the empirical solution against the population optimum.
///
/// The Monte-Carlo estimate evaluates both risks on the same task draws, so
/// the task-level noise common to both largely cancels.
pub fn excess_risk(
    solution: &MinNormSolution,
    pop: &PopulationSolution,
    env: &TaskEnvironment,
    mc: McSettings,
) -> Result<RiskReport> {
    if solution.method != pop.method {
        return Err(Error::InvalidConfig(format!(
            "solution uses {} but the population optimum uses {}",
            solution.method, pop.method
        )));
    }
    mc.check()?;
    let d = env.dim();
    check_len(&solution.theta0_hat, d)?;
    check_len(&pop.theta0_star, d)?;
    let delta = &solution.theta0_hat - &pop.theta0_star;
    let quadratic = pop.mean_weight.quad_form(&delta);
    let population = pop.mean_weight.quad_form(&(&solution.theta0_hat - &env.theta_mean))
        + env.r * env.r / d as f64 * pop.mean_weight.trace();

    let (rotation, draws) = with_workers(mc.workers, || weighted_task_draws(pop.method, env, mc.draws, mc.seed))??;
    let hat = rotation.apply_transpose(&solution.theta0_hat);
    let opt = rotation.apply_transpose(&pop.theta0_star);
    let diffs: Vec<f64> = draws
        .iter()
        .map(|dr| weighted_sq(&dr.w, &(&hat - &dr.u)) - weighted_sq(&dr.w, &(&opt - &dr.u)))
        .collect();
    let est = McEstimate::from_samples(&diffs);
    Ok(RiskReport {
        population_risk: population,
        excess_risk: quadratic,
        excess_via_quadratic: quadratic,
        excess_via_mc: est.mean,
        mc_stderr: est.stderr,
    })
}

/// `Σ_j ‖W^{1/2} a_j‖²` over the columns of `a`.
fn weighted_frobenius(w: &SpectralMatrix, a: &DMatrix<f64>) -> f64 {
    let rotated = match &w.rotation {
        Rotation::Identity => a.clone(),
        Rotation::Dense(v) => v.tr_mul(a),
    };
    let mut total = 0.0;
    for (i, row) in rotated.row_iter().enumerate() {
        total += w.eigvals[i] * row.norm_squared();
    }
    total
}

/// Split the excess risk of `solution` into cross-task variance, bias and
/// per-task (noise) variance, reusing the solution's SVD of `X̃`.
///
/// With `Δ` the noise-driven part of `θ̂0`, the noiseless error is
/// `a + c` where `a = X̃†[X̃_m(θ*_m − θ0)]` and `c = (P − I)θ0`, `P` the
/// projector onto the row space of `X̃`. Pseudo-inverses are used throughout,
/// so rank-deficient designs are handled the same way.
pub fn decompose(dataset: &MetaDataset, solution: &MinNormSolution, pop: &PopulationSolution) -> Result<Decomposition> {
    if solution.method != pop.method {
        return Err(Error::InvalidConfig("solution and population optimum use different methods".into()));
    }
    let d = dataset.dim();
    let design = &solution.design;
    if design.num_tasks() != dataset.num_tasks() || design.x_tilde.ncols() != d {
        return Err(Error::DimensionMismatch { expected: dataset.num_tasks(), got: design.num_tasks() });
    }
    let w = &pop.mean_weight;
    let theta0 = &pop.theta0_star;
    let svd = &solution.svd;

    let mut shifted = DVector::zeros(design.rows());
    for (task, rows) in dataset.tasks.iter().zip(&design.per_task_slices) {
        let block = design.x_tilde.rows(rows.start, rows.len());
        shifted.rows_mut(rows.start, rows.len()).copy_from(&(block * (&task.theta_star - theta0)));
    }
    let cross_task_variance = w.quad_form(&svd.pinv_apply(&shifted));
    let bias = w.quad_form(&(svd.project_row_space(theta0) - theta0));

    // Tr C1 = Tr(S⁻¹ VᵀWV S⁻¹) since UᵀU = I
    let mut v_scaled = svd.v.clone();
    for (j, s) in svd.s.iter().enumerate() {
        v_scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let trace_c1 = weighted_frobenius(w, &v_scaled);

    // training-split noise enters b_m as −H_m e_m^tr, so it adds
    // ‖W^{1/2} X̃†_m H_m‖²_F per task
    let trace_c2 = match solution.method {
        MetaMethod::Erm => 0.0,
        method => {
            let pinv = svd.pinv();
            let mut total = 0.0;
            for (task, rows) in dataset.tasks.iter().zip(&design.per_task_slices) {
                let n_tr = task.n_train() as f64;
                let h = match method {
                    MetaMethod::Maml { alpha } => task.x_val.clone() * task.x_train.transpose() * (alpha / n_tr),
                    MetaMethod::Imaml { gamma } => {
                        let mut p = &task.q_train / gamma;
                        for i in 0..d {
                            p[(i, i)] += 1.0;
                        }
                        let p_inv_xt = spd_solve(&p, &task.x_train.transpose())?;
                        &task.x_val * p_inv_xt / (n_tr * gamma)
                    }
                    MetaMethod::Erm => unreachable!(),
                };
                let a_m = pinv.columns(rows.start, rows.len()) * h;
                total += weighted_frobenius(w, &a_m);
            }
            total
        }
    };
    let sigma2 = dataset.env.sigma_noise * dataset.env.sigma_noise;
    Ok(Decomposition {
        cross_task_variance,
        bias,
        per_task_variance: sigma2 * (trace_c1 + trace_c2),
        trace_c1,
        trace_c2,
        rank: svd.rank(),
    })
}

/// Evaluate
/// `‖E θ*‖² ‖W‖ √(r_0/NM) + σ² (k*/NM + NM/R_{k*}) (1 + V)`
/// with every universal constant set to 1. `report` must carry `NM` and `k*`
/// (see [`SpectrumReport::with_sample_size`]); a missing heterogeneity is
/// treated as `V = 0`.
pub fn theorem_bound(report: &SpectrumReport, norm_mean_theta: f64, sigma: f64) -> Result<BoundReport> {
    let nm = report
        .nm
        .ok_or_else(|| Error::InvalidConfig("spectrum report has no sample size; call with_sample_size".into()))?;
    if nm == 0 {
        return Err(Error::InvalidConfig("NM must be positive".into()));
    }
    let nm = nm as f64;
    let r0 = report.r0().unwrap_or(0.0);
    let bias_term = norm_mean_theta * norm_mean_theta * report.op_norm * (r0 / nm).sqrt();
    let heterogeneity_factor = 1.0 + report.heterogeneity.unwrap_or(0.0);
    match (report.k_star, report.big_r_at_k_star()) {
        (Some(k), Some(big_r)) => {
            let variance_term = sigma * sigma * (k as f64 / nm + nm / big_r);
            Ok(BoundReport {
                bias_term,
                variance_term,
                heterogeneity_factor,
                total: bias_term + variance_term * heterogeneity_factor,
                k_star_defined: true,
            })
        }
        _ => Ok(BoundReport {
            bias_term,
            variance_term: f64::INFINITY,
            heterogeneity_factor,
            total: f64::INFINITY,
            k_star_defined: false,
        }),
    }
}

/// Meta-test risk `E[(y − θ̂_mᵀx)²]` when each test task adapts from `theta`
/// on `n_adapt` fresh samples. Includes the noise floor `σ²`; the finite-sample
/// corrections come from sampling rather than a closed form.
pub fn finite_adaptation_risk(
    method: MetaMethod,
    theta: &DVector<f64>,
    env: &TaskEnvironment,
    n_adapt: usize,
    mc: McSettings,
) -> Result<McEstimate> {
    method.validate()?;
    env.validate()?;
    mc.check()?;
    check_len(theta, env.dim())?;
    if n_adapt == 0 {
        return Err(Error::InvalidConfig("n_adapt must be at least 1".into()));
    }
    let sampler = CovarianceSampler::new(&env.cov)?;
    let root = StreamKey::new(mc.seed).tagged(StreamTag::Adaptation);
    let sigma2 = env.sigma_noise * env.sigma_noise;
    let samples = with_workers(mc.workers, || {
        (0..mc.draws)
            .into_par_iter()
            .map(|k| {
                let key = root.child(k as u64);
                let cov = sampler.draw(&mut key.tagged(StreamTag::Covariance).rng())?;
                let theta_star = sample_theta_star(env, &mut key.tagged(StreamTag::Theta).rng());
                let x = sample_features(&cov, env.family, n_adapt, &mut key.tagged(StreamTag::Features).rng());
                let mut noise_rng = key.tagged(StreamTag::Noise).rng();
                let noise = DVector::from_fn(n_adapt, |_, _| env.sigma_noise * noise_rng.sample::<f64, _>(StandardNormal));
                let y = &x * &theta_star + noise;
                let adapted = adapt_on(method, theta, &x, &y)?;
                Ok(cov.quad_form(&(adapted - &theta_star)) + sigma2)
            })
            .collect::<Result<Vec<f64>>>()
    })??;
    Ok(McEstimate::from_samples(&samples))
}
