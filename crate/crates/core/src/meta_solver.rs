//! Empirical minimum-norm meta solution and the population-optimal solution.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{effective_design, EffectiveDesign, ErmConvention, MetaMethod};
use crate::error::{Error, Result};
use crate::linalg::ThinSvd;
use crate::quadrature::folded_normal_expectation;
use crate::rng::{StreamKey, StreamTag};
use crate::task_model::{
    sample_theta_star, CovarianceSampler, MetaDataset, Rotation, ScaleLaw, SpectralMatrix, TaskEnvironment,
};

/// Default relative singular-value cutoff.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Singular values below `tol · σ_max` are treated as zero.
    pub tol: f64,
    pub erm: ErmConvention,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_RANK_TOL, erm: ErmConvention::Validation }
    }
}

/// `θ̂0 = X̃† b`, together with the factors it was computed from.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub theta0_hat: DVector<f64>,
    /// Numerical rank of `X̃`.
    pub rank: usize,
    /// `(1/M) Σ_m ‖X̃_m θ̂0 − b_m‖²`
    pub train_loss: f64,
    pub residual_norm: f64,
    /// Set when the design is identically zero.
    pub degenerate: bool,
    pub method: MetaMethod,
    pub design: EffectiveDesign,
    pub svd: ThinSvd,
}

impl MinNormSolution {
    /// True when `X̃` has full row rank, i.e. the solution interpolates.
    pub fn interpolates(&self) -> bool {
        self.rank == self.design.rows()
    }

    /// True when `X̃` has full column rank (unique least-squares solution).
    pub fn full_column_rank(&self) -> bool {
        self.rank == self.design.x_tilde.ncols()
    }
}

pub fn min_norm_solve(method: MetaMethod, dataset: &MetaDataset, opts: &SolveOptions) -> Result<MinNormSolution> {
    let design = effective_design(method, dataset, opts.erm)?;
    solve_design(method, design, opts.tol)
}

/// Minimum-norm least-squares solution for an already assembled design.
pub fn solve_design(method: MetaMethod, design: EffectiveDesign, tol: f64) -> Result<MinNormSolution> {
    if !(0.0..1.0).contains(&tol) {
        return Err(Error::InvalidConfig(format!("rank tolerance {tol} must lie in [0, 1)")));
    }
    if design.x_tilde.iter().chain(design.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("effective design has non-finite entries (adaptation overflowed)".into()));
    }
    let svd = ThinSvd::new(&design.x_tilde, tol)?;
    let degenerate = svd.rank() == 0;
    let theta0_hat = if degenerate {
        DVector::zeros(design.x_tilde.ncols())
    } else {
        svd.pinv_apply(&design.b)
    };
    if theta0_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite minimum-norm solution".into()));
    }
    let residual_norm = (&design.x_tilde * &theta0_hat - &design.b).norm();
    let train_loss = design.objective(&theta0_hat);
    Ok(MinNormSolution {
        rank: svd.rank(),
        theta0_hat,
        train_loss,
        residual_norm,
        degenerate,
        method,
        design,
        svd,
    })
}

/// How expectations over the task distribution are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum Estimator {
    /// Closed form over the fixed spectrum, numerical integration over `|1 + ω|`.
    Analytic,
    MonteCarlo { num_tasks: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct PopulationSolution {
    pub method: MetaMethod,
    /// `θ0 = E[W_m]⁻¹ E[W_m θ*_m]`
    pub theta0_star: DVector<f64>,
    /// `W = E[W_m]`
    pub mean_weight: SpectralMatrix,
    pub estimator: Estimator,
    /// Per-coordinate Monte-Carlo standard error of `θ0` (eigenbasis
    /// coordinates); `None` for the analytic estimator.
    pub theta0_stderr: Option<DVector<f64>>,
}

/// `E_ω[f(|1 + ω| λ)]` per base eigenvalue.
fn expected_mapped_spectrum(method: MetaMethod, base: &[f64], law: ScaleLaw) -> DVector<f64> {
    match law {
        ScaleLaw::Fixed => DVector::from_iterator(base.len(), base.iter().map(|&l| method.map_eigenvalue(l))),
        ScaleLaw::FoldedNormal { sigma } => DVector::from_iterator(
            base.len(),
            base.iter().map(|&l| {
                // iMAML's map turns over at a scale of γ/λ
                let breaks: Vec<f64> = match method {
                    MetaMethod::Imaml { gamma } if l > 0.0 => [0.25, 1.0, 4.0].iter().map(|t| t * gamma / l).collect(),
                    _ => Vec::new(),
                };
                folded_normal_expectation(sigma, &breaks, |c| method.map_eigenvalue(c * l))
            }),
        ),
    }
}

/// Monte-Carlo accumulation in the shared eigenbasis.
struct McMoments {
    mean_w: DVector<f64>,
    theta0_coords: DVector<f64>,
    theta0_stderr: DVector<f64>,
}

/// One sampled task seen through the population weight, in the shared
/// eigenbasis: the eigenvalues of `W_m` and the coordinates of `θ*_m`.
#[derive(Debug, Clone)]
pub(crate) struct WeightedDraw {
    pub w: DVector<f64>,
    pub u: DVector<f64>,
}

/// `count` independent task draws; draw `k` uses its own substream so the
/// result does not depend on how rayon schedules the work.
pub(crate) fn weighted_task_draws(
    method: MetaMethod,
    env: &TaskEnvironment,
    count: usize,
    seed: u64,
) -> Result<(Rotation, Vec<WeightedDraw>)> {
    let sampler = CovarianceSampler::new(&env.cov)?;
    let root = StreamKey::new(seed).tagged(StreamTag::MonteCarlo);
    let draws = (0..count)
        .into_par_iter()
        .map(|k| {
            let key = root.child(k as u64);
            let cov = sampler.draw(&mut key.tagged(StreamTag::Covariance).rng())?;
            let theta = sample_theta_star(env, &mut key.tagged(StreamTag::Theta).rng());
            Ok(WeightedDraw {
                w: cov.eigvals.map(|l| method.map_eigenvalue(l)),
                u: sampler.rotation().apply_transpose(&theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sampler.rotation().clone(), draws))
}

fn monte_carlo_moments(method: MetaMethod, env: &TaskEnvironment, num_tasks: usize, seed: u64) -> Result<McMoments> {
    if num_tasks < 2 {
        return Err(Error::InvalidConfig("Monte-Carlo estimator needs at least 2 tasks".into()));
    }
    let d = env.dim();
    let (_, draws) = weighted_task_draws(method, env, num_tasks, seed)?;
    let draws_w: Vec<_> = draws.iter().map(|t| &t.w).collect();
    let draws_u: Vec<_> = draws.iter().map(|t| &t.u).collect();
    let n = num_tasks as f64;
    let mean_w = draws_w.iter().fold(DVector::zeros(d), |acc, w| acc + *w) / n;
    let mean_wu = draws_w
        .iter()
        .zip(&draws_u)
        .fold(DVector::zeros(d), |acc, (w, u)| acc + w.component_mul(u))
        / n;
    if let Some(l) = mean_w.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::SingularMeanWeight(format!("Monte-Carlo mean weight has eigenvalue {l}")));
    }
    let ratio = mean_wu.component_div(&mean_w);
    // delta-method variance of the ratio estimator
    let mut var: DVector<f64> = DVector::zeros(d);
    for (w, u) in draws_w.iter().zip(&draws_u) {
        for i in 0..d {
            let r = w[i] * u[i] - ratio[i] * w[i];
            var[i] += r * r;
        }
    }
    let stderr = DVector::from_fn(d, |i, _| (var[i] / (n - 1.0)).sqrt() / (n.sqrt() * mean_w[i]));
    Ok(McMoments { mean_w, theta0_coords: ratio, theta0_stderr: stderr })
}

/// `W = E_m[W_m]`.
pub fn mean_weight(method: MetaMethod, env: &TaskEnvironment, estimator: Estimator) -> Result<SpectralMatrix> {
    Ok(population_solution(method, env, estimator)?.mean_weight)
}

/// Population-optimal meta initialization.
pub fn population_solution(method: MetaMethod, env: &TaskEnvironment, estimator: Estimator) -> Result<PopulationSolution> {
    let pop = population_solution_unchecked(method, env, estimator)?;
    let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
    if !finite(&pop.theta0_star) || !finite(&pop.mean_weight.eigvals) {
        return Err(Error::Numerical(format!("population solution for {method} is not finite")));
    }
    Ok(pop)
}

fn population_solution_unchecked(
    method: MetaMethod,
    env: &TaskEnvironment,
    estimator: Estimator,
) -> Result<PopulationSolution> {
    method.validate()?;
    env.validate()?;
    let rotation = env.cov.rotation();
    match estimator {
        Estimator::Analytic => {
            let eig = expected_mapped_spectrum(method, &env.cov.base_spectrum(), env.cov.scale_law());
            let w = SpectralMatrix { eigvals: eig, rotation };
            // θ*_m is independent of W_m, so E[W_m θ*_m] = W θ̄
            let rhs = w.mul_vec(&env.theta_mean);
            let theta0_star = w.solve(&rhs)?;
            Ok(PopulationSolution { method, theta0_star, mean_weight: w, estimator, theta0_stderr: None })
        }
        Estimator::MonteCarlo { num_tasks, seed } => {
            let mc = monte_carlo_moments(method, env, num_tasks, seed)?;
            let theta0_star = rotation.apply(&mc.theta0_coords);
            Ok(PopulationSolution {
                method,
                theta0_star,
                mean_weight: SpectralMatrix { eigvals: mc.mean_w, rotation },
                estimator,
                theta0_stderr: Some(mc.theta0_stderr),
            })
        }
    }
}
