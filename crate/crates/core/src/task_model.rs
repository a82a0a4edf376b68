//! Synthetic multi-task linear regression.
//!
//! Task `m` draws a covariance `Q_m = V Λ_m Vᵀ`, a ground-truth parameter
//! `θ*_m = θ̄ + (R/√d) g`, features `x = V Λ_m^{1/2} z` with unit-variance
//! sub-Gaussian `z`, and targets `y = θ*_mᵀ x + ε` with `ε ~ N(0, σ²)`.
//! Each draw is keyed by a [`StreamKey`] so datasets are reproducible and
//! independent of evaluation order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{haar_orthogonal, sample_covariance};
use crate::rng::{StreamKey, StreamTag};

/// Shape of the per-task covariance spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariancePattern {
    /// `diag(I_{d1}, β I_{d-d1})`
    SpikedIdentity { d1: usize, beta: f64 },
    /// `|1 + ω_m| diag(I_{d1}, β I_{d-d1})` with `ω_m ~ N(0, σ_ω²)` drawn per task.
    ScaledSpiked { d1: usize, beta: f64, sigma_omega: f64 },
    /// Fixed spectrum, non-increasing and strictly positive.
    ExplicitSpectrum { lambdas: Vec<f64> },
    /// `base` rotated by a Haar-random orthogonal matrix shared by all tasks.
    Rotated { base: Box<CovarianceSpec>, rotation_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub dim: usize,
    pub pattern: CovariancePattern,
}

/// Distribution of the per-task scalar multiplying the base spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleLaw {
    Fixed,
    /// `|1 + ω|`, `ω ~ N(0, sigma²)`
    FoldedNormal { sigma: f64 },
}

impl CovarianceSpec {
    pub fn spiked(dim: usize, d1: usize, beta: f64) -> Self {
        Self { dim, pattern: CovariancePattern::SpikedIdentity { d1, beta } }
    }

    pub fn scaled_spiked(dim: usize, d1: usize, beta: f64, sigma_omega: f64) -> Self {
        Self { dim, pattern: CovariancePattern::ScaledSpiked { d1, beta, sigma_omega } }
    }

    pub fn explicit(lambdas: Vec<f64>) -> Self {
        Self { dim: lambdas.len(), pattern: CovariancePattern::ExplicitSpectrum { lambdas } }
    }

    pub fn identity(dim: usize) -> Self {
        Self::spiked(dim, dim, 1.0)
    }

    pub fn rotated(self, rotation_seed: u64) -> Self {
        Self {
            dim: self.dim,
            pattern: CovariancePattern::Rotated { base: Box::new(self), rotation_seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidCovariance("dimension must be positive".into()));
        }
        match &self.pattern {
            CovariancePattern::SpikedIdentity { d1, beta }
            | CovariancePattern::ScaledSpiked { d1, beta, .. } => {
                if *d1 > self.dim {
                    return Err(Error::InvalidCovariance(format!("d1={d1} exceeds d={}", self.dim)));
                }
                if !(beta.is_finite() && (*beta > 0.0 || *d1 == self.dim)) {
                    return Err(Error::InvalidCovariance(format!(
                        "beta={beta} gives a non-positive eigenvalue"
                    )));
                }
                if let CovariancePattern::ScaledSpiked { sigma_omega, .. } = &self.pattern {
                    if !(sigma_omega.is_finite() && *sigma_omega >= 0.0) {
                        return Err(Error::InvalidCovariance(format!(
                            "sigma_omega={sigma_omega} must be a nonnegative real"
                        )));
                    }
                }
            }
            CovariancePattern::ExplicitSpectrum { lambdas } => {
                if lambdas.len() != self.dim {
                    return Err(Error::DimensionMismatch { expected: self.dim, got: lambdas.len() });
                }
                if let Some((i, l)) = lambdas.iter().enumerate().find(|(_, l)| !(**l > 0.0 && l.is_finite())) {
                    return Err(Error::InvalidCovariance(format!(
                        "eigenvalue {i} is {l}; every eigenvalue must be strictly positive"
                    )));
                }
                if lambdas.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::InvalidCovariance("spectrum must be non-increasing".into()));
                }
            }
            CovariancePattern::Rotated { base, .. } => {
                if base.dim != self.dim {
                    return Err(Error::DimensionMismatch { expected: self.dim, got: base.dim });
                }
                base.validate()?;
            }
        }
        Ok(())
    }

    /// Spectrum before any per-task scaling, non-increasing.
    pub fn base_spectrum(&self) -> Vec<f64> {
        match &self.pattern {
            CovariancePattern::SpikedIdentity { d1, beta }
            | CovariancePattern::ScaledSpiked { d1, beta, .. } => {
                let (d1, beta) = (*d1, *beta);
                let mut v: Vec<f64> = (0..self.dim).map(|i| if i < d1 { 1.0 } else { beta }).collect();
                // beta > 1 puts the larger block last
                v.sort_by(|a, b| b.total_cmp(a));
                v
            }
            CovariancePattern::ExplicitSpectrum { lambdas } => lambdas.clone(),
            CovariancePattern::Rotated { base, .. } => base.base_spectrum(),
        }
    }

    pub fn scale_law(&self) -> ScaleLaw {
        match &self.pattern {
            CovariancePattern::ScaledSpiked { sigma_omega, .. } if *sigma_omega > 0.0 => {
                ScaleLaw::FoldedNormal { sigma: *sigma_omega }
            }
            CovariancePattern::Rotated { base, .. } => base.scale_law(),
            _ => ScaleLaw::Fixed,
        }
    }

    /// Eigenbasis shared by every task.
    pub fn rotation(&self) -> Rotation {
        match &self.pattern {
            CovariancePattern::Rotated { base, rotation_seed } => {
                let inner = base.rotation();
                let q = haar_orthogonal(
                    self.dim,
                    &mut StreamKey::new(*rotation_seed).tagged(StreamTag::Rotation).rng(),
                );
                match inner {
                    Rotation::Identity => Rotation::Dense(Arc::new(q)),
                    Rotation::Dense(v) => Rotation::Dense(Arc::new(q * v.as_ref())),
                }
            }
            _ => Rotation::Identity,
        }
    }
}

/// Orthonormal eigenbasis `V`.
#[derive(Debug, Clone, PartialEq)]
pub enum Rotation {
    Identity,
    Dense(Arc<DMatrix<f64>>),
}

impl Rotation {
    pub fn is_identity(&self) -> bool {
        matches!(self, Rotation::Identity)
    }

    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Rotation::Identity => DMatrix::identity(dim, dim),
            Rotation::Dense(v) => v.as_ref().clone(),
        }
    }

    /// `V x`
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Rotation::Identity => x.clone(),
            Rotation::Dense(v) => v.as_ref() * x,
        }
    }

    /// `Vᵀ x`
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Rotation::Identity => x.clone(),
            Rotation::Dense(v) => v.tr_mul(x),
        }
    }
}

/// A symmetric matrix stored as `V diag(eigvals) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    pub eigvals: DVector<f64>,
    pub rotation: Rotation,
}

impl SpectralMatrix {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        match &self.rotation {
            Rotation::Identity => DMatrix::from_diagonal(&self.eigvals),
            Rotation::Dense(v) => {
                let mut scaled = v.as_ref().clone();
                for (j, l) in self.eigvals.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(*l);
                }
                let mut m = scaled * v.transpose();
                crate::linalg::symmetrize(&mut m);
                debug_assert_eq!(m.nrows(), d);
                m
            }
        }
    }

    /// `‖x‖²_A = xᵀ A x`
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let c = self.rotation.apply_transpose(x);
        crate::linalg::compensated_sum(c.iter().zip(self.eigvals.iter()).map(|(c, l)| l * c * c))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.rotation.apply_transpose(x);
        self.rotation.apply(&c.component_mul(&self.eigvals))
    }

    /// `A⁻¹ x`; fails if any eigenvalue is not strictly positive.
    pub fn solve(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(l) = self.eigvals.iter().find(|l| !(**l > 0.0)) {
            return Err(Error::SingularMeanWeight(format!("eigenvalue {l}")));
        }
        let c = self.rotation.apply_transpose(x);
        Ok(self.rotation.apply(&c.component_div(&self.eigvals)))
    }

    pub fn trace(&self) -> f64 {
        crate::linalg::compensated_sum(self.eigvals.iter().copied())
    }
}

/// One task's population covariance `Q_m`.
pub type Covariance = SpectralMatrix;

/// Draw the per-task scale `|1 + ω_m|` (1 for fixed spectra).
pub fn draw_scale<R: Rng + ?Sized>(law: ScaleLaw, rng: &mut R) -> f64 {
    match law {
        ScaleLaw::Fixed => 1.0,
        ScaleLaw::FoldedNormal { sigma } => (1.0 + sigma * rng.sample::<f64, _>(StandardNormal)).abs(),
    }
}

/// Per-task covariance draws with the shared spectrum and eigenbasis cached.
#[derive(Debug, Clone)]
pub struct CovarianceSampler {
    base: Vec<f64>,
    law: ScaleLaw,
    rotation: Rotation,
}

impl CovarianceSampler {
    pub fn new(spec: &CovarianceSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { base: spec.base_spectrum(), law: spec.scale_law(), rotation: spec.rotation() })
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn base_spectrum(&self) -> &[f64] {
        &self.base
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Covariance> {
        let scale = draw_scale(self.law, rng);
        if !(scale > 0.0) {
            return Err(Error::InvalidCovariance("per-task scale |1 + omega| is zero".into()));
        }
        Ok(SpectralMatrix {
            eigvals: DVector::from_iterator(self.base.len(), self.base.iter().map(|l| l * scale)),
            rotation: self.rotation.clone(),
        })
    }
}

/// Build `Q_m` for one task; `rng` supplies the per-task scale `ω_m`.
pub fn build_covariance<R: Rng + ?Sized>(spec: &CovarianceSpec, rng: &mut R) -> Result<Covariance> {
    CovarianceSampler::new(spec)?.draw(rng)
}

/// Distribution of the standardized feature entries `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubGaussianFamily {
    #[default]
    Gaussian,
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    UniformBounded,
}

impl SubGaussianFamily {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SubGaussianFamily::Gaussian => rng.sample(StandardNormal),
            SubGaussianFamily::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            SubGaussianFamily::UniformBounded => {
                let s = 3.0_f64.sqrt();
                rng.random_range(-s..s)
            }
        }
    }
}

/// The task distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEnvironment {
    pub cov: CovarianceSpec,
    /// Parameter scale: `Cov[θ*_m] = (R²/d) I`.
    pub r: f64,
    /// `E[θ*_m]`
    pub theta_mean: DVector<f64>,
    pub sigma_noise: f64,
    pub family: SubGaussianFamily,
    /// `s = N_tr / N`
    pub split_fraction: f64,
}

impl TaskEnvironment {
    /// Defaults: `R = 1`, zero-mean `θ*`, `σ = 1`, Gaussian features, `s = 0.5`.
    pub fn new(cov: CovarianceSpec) -> Self {
        let d = cov.dim;
        Self {
            cov,
            r: 1.0,
            theta_mean: DVector::zeros(d),
            sigma_noise: 1.0,
            family: SubGaussianFamily::Gaussian,
            split_fraction: 0.5,
        }
    }

    pub fn with_r(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma_noise = sigma;
        self
    }

    pub fn with_family(mut self, family: SubGaussianFamily) -> Self {
        self.family = family;
        self
    }

    pub fn with_split(mut self, s: f64) -> Self {
        self.split_fraction = s;
        self
    }

    pub fn with_theta_mean(mut self, mean: DVector<f64>) -> Self {
        self.theta_mean = mean;
        self
    }

    /// Shared mean `(norm/√d)·1`, so that `‖E[θ*_m]‖ = norm`.
    pub fn with_theta_mean_norm(mut self, norm: f64) -> Self {
        let d = self.dim();
        self.theta_mean = DVector::from_element(d, norm / (d as f64).sqrt());
        self
    }

    pub fn dim(&self) -> usize {
        self.cov.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.cov.validate()?;
        if self.theta_mean.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: self.theta_mean.len() });
        }
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::InvalidEnvironment(format!("R={} must be a nonnegative real", self.r)));
        }
        if !(self.sigma_noise.is_finite() && self.sigma_noise >= 0.0) {
            return Err(Error::InvalidEnvironment(format!("sigma={} must be nonnegative", self.sigma_noise)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidEnvironment(format!(
                "split fraction {} must lie in (0, 1)",
                self.split_fraction
            )));
        }
        Ok(())
    }

    /// `N_tr = round(sN)`, ties rounded up.
    pub fn n_train(&self, n: usize) -> usize {
        (self.split_fraction * n as f64 + 0.5).floor() as usize
    }

    pub fn split_sizes(&self, n: usize) -> Result<(usize, usize)> {
        let n_tr = self.n_train(n);
        if n < 2 || n_tr < 1 || n_tr >= n {
            return Err(Error::SplitTooSmall { n, split: self.split_fraction });
        }
        Ok((n_tr, n - n_tr))
    }
}

/// One task's realization.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub theta_star: DVector<f64>,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_val: DMatrix<f64>,
    pub y_val: DVector<f64>,
    /// `(1/N_tr) X_trᵀ X_tr`
    pub q_train: DMatrix<f64>,
    /// `(1/N_va) X_vaᵀ X_va`
    pub q_val: DMatrix<f64>,
    /// Population covariance `Q_m` the task was drawn from.
    pub covariance: Covariance,
    /// Fingerprint of the stream key that generated this task.
    pub seed: u64,
}

impl TaskData {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_val(&self) -> usize {
        self.x_val.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub tasks: Vec<TaskData>,
    pub env: TaskEnvironment,
}

impl MetaDataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.env.dim()
    }

    /// Samples per task.
    pub fn n_per_task(&self) -> usize {
        self.tasks.first().map(|t| t.n_train() + t.n_val()).unwrap_or(0)
    }

    /// `d > N M`
    pub fn is_overparameterized(&self) -> bool {
        self.dim() > self.n_per_task() * self.num_tasks()
    }
}

/// `θ* = θ̄ + (R/√d) g` with standard normal `g`.
pub fn sample_theta_star<R: Rng + ?Sized>(env: &TaskEnvironment, rng: &mut R) -> DVector<f64> {
    let d = env.dim();
    let scale = env.r / (d as f64).sqrt();
    if scale == 0.0 {
        return env.theta_mean.clone();
    }
    DVector::from_iterator(
        d,
        env.theta_mean.iter().map(|m| m + scale * rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Draw `n` rows `x = V Λ^{1/2} z`.
pub fn sample_features<R: Rng + ?Sized>(
    cov: &Covariance,
    family: SubGaussianFamily,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = cov.dim();
    let sqrt_l: Vec<f64> = cov.eigvals.iter().map(|l| l.sqrt()).collect();
    // row-major fill keeps draws in sample order
    let z = DMatrix::from_row_iterator(n, d, (0..n * d).map(|k| sqrt_l[k % d] * family.sample(rng)));
    match &cov.rotation {
        Rotation::Identity => z,
        Rotation::Dense(v) => z * v.transpose(),
    }
}

/// Draw one task from `env` with `n` samples split into train and validation.
pub fn sample_task(env: &TaskEnvironment, n: usize, key: &StreamKey) -> Result<TaskData> {
    env.validate()?;
    sample_task_with(env, &CovarianceSampler::new(&env.cov)?, n, key)
}

fn sample_task_with(env: &TaskEnvironment, sampler: &CovarianceSampler, n: usize, key: &StreamKey) -> Result<TaskData> {
    let (n_tr, n_va) = env.split_sizes(n)?;
    let covariance = sampler.draw(&mut key.tagged(StreamTag::Covariance).rng())?;
    let theta_star = sample_theta_star(env, &mut key.tagged(StreamTag::Theta).rng());
    let x = sample_features(&covariance, env.family, n, &mut key.tagged(StreamTag::Features).rng());
    let mut noise_rng = key.tagged(StreamTag::Noise).rng();
    let noise = DVector::from_iterator(n, (0..n).map(|_| env.sigma_noise * noise_rng.sample::<f64, _>(StandardNormal)));
    let y = &x * &theta_star + noise;

    let x_train = x.rows(0, n_tr).into_owned();
    let x_val = x.rows(n_tr, n_va).into_owned();
    let y_train = y.rows(0, n_tr).into_owned();
    let y_val = y.rows(n_tr, n_va).into_owned();
    Ok(TaskData {
        q_train: sample_covariance(&x_train),
        q_val: sample_covariance(&x_val),
        theta_star,
        x_train,
        y_train,
        x_val,
        y_val,
        covariance,
        seed: key.fingerprint(),
    })
}

/// Draw `m` tasks; task `i` uses the substream `key.child(i)`, so growing `m`
/// leaves earlier tasks unchanged.
pub fn sample_meta_dataset(env: &TaskEnvironment, m: usize, n: usize, key: &StreamKey) -> Result<MetaDataset> {
    if m == 0 {
        return Err(Error::InvalidEnvironment("at least one task is required".into()));
    }
    env.validate()?;
    let sampler = CovarianceSampler::new(&env.cov)?;
    let tasks = (0..m)
        .map(|i| sample_task_with(env, &sampler, n, &key.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset { tasks, env: env.clone() })
}
