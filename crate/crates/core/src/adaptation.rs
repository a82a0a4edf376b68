//! Inner-level adaptation and per-task weight matrices.
//!
//! The per-task loss is `ℓ(θ) = (1/2N)‖Xθ − y‖²`, so its gradient is
//! `Q̂θ − (1/N)Xᵀy` with `Q̂ = (1/N)XᵀX`. Under this convention
//!
//! | method | adapted parameter | `Ŵ_m` | `W_m` eigenvalue map |
//! |--------|-------------------|-------|----------------------|
//! | ERM    | `θ0` | `Q̂^va` | `λ` |
//! | MAML   | `θ0 − α∇ℓ(θ0)` | `(I−αQ̂^tr) Q̂^va (I−αQ̂^tr)` | `λ(1−αλ)²` |
//! | iMAML  | `argmin ℓ(θ) + (γ/2)‖θ−θ0‖²` | `(I+Q̂^tr/γ)⁻¹ Q̂^va (I+Q̂^tr/γ)⁻¹` | `λ/(1+λ/γ)²` |

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_solve, spd_solve_vec, symmetrize};
use crate::task_model::{MetaDataset, SpectralMatrix, TaskData};

/// Meta-learning algorithm and its inner hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MetaMethod {
    Erm,
    Maml { alpha: f64 },
    Imaml { gamma: f64 },
}

impl MetaMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MetaMethod::Erm => Ok(()),
            MetaMethod::Maml { alpha } if alpha.is_finite() => Ok(()),
            MetaMethod::Maml { alpha } => Err(Error::InvalidHyperparameter(format!("alpha={alpha} is not finite"))),
            MetaMethod::Imaml { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            MetaMethod::Imaml { gamma } => {
                Err(Error::InvalidHyperparameter(format!("iMAML requires gamma > 0, got {gamma}")))
            }
        }
    }

    /// Short label: `er`, `ma` or `im`.
    pub fn label(&self) -> &'static str {
        match self {
            MetaMethod::Erm => "er",
            MetaMethod::Maml { .. } => "ma",
            MetaMethod::Imaml { .. } => "im",
        }
    }

    pub fn hyperparameter(&self) -> Option<f64> {
        match *self {
            MetaMethod::Erm => None,
            MetaMethod::Maml { alpha } => Some(alpha),
            MetaMethod::Imaml { gamma } => Some(gamma),
        }
    }

    /// Eigenvalue of `W_m` belonging to eigenvalue `λ` of `Q_m`.
    pub fn map_eigenvalue(&self, lambda: f64) -> f64 {
        match *self {
            MetaMethod::Erm => lambda,
            MetaMethod::Maml { alpha } => {
                let f = 1.0 - alpha * lambda;
                lambda * f * f
            }
            MetaMethod::Imaml { gamma } => {
                let f = 1.0 + lambda / gamma;
                lambda / (f * f)
            }
        }
    }
}

impl fmt::Display for MetaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaMethod::Erm => write!(f, "erm"),
            MetaMethod::Maml { alpha } => write!(f, "maml(alpha={alpha})"),
            MetaMethod::Imaml { gamma } => write!(f, "imaml(gamma={gamma})"),
        }
    }
}

/// Which samples the ERM objective fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErmConvention {
    /// Validation split only; makes ERM coincide with MAML at `α = 0`.
    #[default]
    Validation,
    /// Train and validation pooled (`N_va = N`).
    Pooled,
}

/// `Q̂θ − (1/N)Xᵀy`
pub fn inner_gradient(theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    x.tr_mul(&(x * theta - y)) / n
}

fn check_dim(task: &TaskData, d: usize) -> Result<()> {
    if task.dim() != d {
        return Err(Error::DimensionMismatch { expected: task.dim(), got: d });
    }
    Ok(())
}

/// `I + Q̂^tr / γ`
fn imaml_system(task: &TaskData, gamma: f64) -> DMatrix<f64> {
    let d = task.dim();
    let mut p = &task.q_train / gamma;
    for i in 0..d {
        p[(i, i)] += 1.0;
    }
    p
}

/// Task-specific parameter produced from `theta0` on the task's training split.
pub fn adapt(method: MetaMethod, theta0: &DVector<f64>, task: &TaskData) -> Result<DVector<f64>> {
    method.validate()?;
    check_dim(task, theta0.len())?;
    adapt_on(method, theta0, &task.x_train, &task.y_train)
}

/// Adaptation on arbitrary data `(x, y)`.
pub fn adapt_on(
    method: MetaMethod,
    theta0: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    match method {
        MetaMethod::Erm => Ok(theta0.clone()),
        MetaMethod::Maml { alpha } => Ok(theta0 - inner_gradient(theta0, x, y) * alpha),
        MetaMethod::Imaml { gamma } => {
            let n = x.nrows() as f64;
            let d = theta0.len();
            // (Q̂ + γI)⁻¹(Xᵀy/N + γθ0) = (I + Q̂/γ)⁻¹(Xᵀy/(Nγ) + θ0)
            let mut p = x.tr_mul(x) / (n * gamma);
            symmetrize(&mut p);
            for i in 0..d {
                p[(i, i)] += 1.0;
            }
            let rhs = x.tr_mul(y) / (n * gamma) + theta0;
            spd_solve_vec(&p, &rhs)
        }
    }
}

/// Empirical weight `Ŵ_m`.
pub fn empirical_weight(method: MetaMethod, task: &TaskData, erm: ErmConvention) -> Result<DMatrix<f64>> {
    method.validate()?;
    let mut w = match method {
        MetaMethod::Erm => match erm {
            ErmConvention::Validation => task.q_val.clone(),
            ErmConvention::Pooled => {
                let n = (task.n_train() + task.n_val()) as f64;
                (task.x_train.tr_mul(&task.x_train) + task.x_val.tr_mul(&task.x_val)) / n
            }
        },
        MetaMethod::Maml { alpha } => {
            let d = task.dim();
            let a = DMatrix::identity(d, d) - &task.q_train * alpha;
            &a * &task.q_val * &a
        }
        MetaMethod::Imaml { gamma } => {
            let p = imaml_system(task, gamma);
            let left = spd_solve(&p, &task.q_val)?;
            // P⁻¹ Q̂ P⁻¹ = (P⁻¹ (P⁻¹ Q̂)ᵀ)ᵀ
            spd_solve(&p, &left.transpose())?.transpose()
        }
    };
    symmetrize(&mut w);
    Ok(w)
}

/// Population weight `W_m`: same eigenvectors as `Q_m`, eigenvalues mapped.
pub fn population_weight(method: MetaMethod, cov: &SpectralMatrix) -> SpectralMatrix {
    SpectralMatrix {
        eigvals: cov.eigvals.map(|l| method.map_eigenvalue(l)),
        rotation: cov.rotation.clone(),
    }
}

/// Row-stacked per-task effective designs `X̃_m` and adjusted targets `b_m`,
/// so that the meta-training objective is `(1/M) Σ ‖X̃_m θ0 − b_m‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDesign {
    pub x_tilde: DMatrix<f64>,
    pub b: DVector<f64>,
    pub per_task_slices: Vec<Range<usize>>,
}

impl EffectiveDesign {
    pub fn rows(&self) -> usize {
        self.x_tilde.nrows()
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task_slices.len()
    }

    /// Meta-training objective at `theta0`.
    pub fn objective(&self, theta0: &DVector<f64>) -> f64 {
        let r = &self.x_tilde * theta0 - &self.b;
        r.norm_squared() / self.num_tasks().max(1) as f64
    }
}

fn task_design(method: MetaMethod, task: &TaskData, erm: ErmConvention) -> Result<(DMatrix<f64>, DVector<f64>)> {
    Ok(match method {
        MetaMethod::Erm => match erm {
            ErmConvention::Validation => (task.x_val.clone(), task.y_val.clone()),
            ErmConvention::Pooled => {
                let (n_tr, n_va, d) = (task.n_train(), task.n_val(), task.dim());
                let mut x = DMatrix::zeros(n_tr + n_va, d);
                x.rows_mut(0, n_tr).copy_from(&task.x_train);
                x.rows_mut(n_tr, n_va).copy_from(&task.x_val);
                let mut y = DVector::zeros(n_tr + n_va);
                y.rows_mut(0, n_tr).copy_from(&task.y_train);
                y.rows_mut(n_tr, n_va).copy_from(&task.y_val);
                (x, y)
            }
        },
        MetaMethod::Maml { alpha } => {
            let d = task.dim();
            let n_tr = task.n_train() as f64;
            let a = DMatrix::identity(d, d) - &task.q_train * alpha;
            let x = &task.x_val * a;
            let b = &task.y_val - &task.x_val * (task.x_train.tr_mul(&task.y_train) * (alpha / n_tr));
            (x, b)
        }
        MetaMethod::Imaml { gamma } => {
            let p = imaml_system(task, gamma);
            let n_tr = task.n_train() as f64;
            let x = spd_solve(&p, &task.x_val.transpose())?.transpose();
            let c = task.x_train.tr_mul(&task.y_train) / (n_tr * gamma);
            let b = &task.y_val - &task.x_val * spd_solve_vec(&p, &c)?;
            (x, b)
        }
    })
}

/// Stack every task's effective design.
pub fn effective_design(method: MetaMethod, dataset: &MetaDataset, erm: ErmConvention) -> Result<EffectiveDesign> {
    method.validate()?;
    if dataset.tasks.is_empty() {
        return Err(Error::InvalidEnvironment("dataset has no tasks".into()));
    }
    let d = dataset.dim();
    let blocks = dataset
        .tasks
        .iter()
        .map(|t| {
            check_dim(t, d)?;
            task_design(method, t, erm)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = blocks.iter().map(|(x, _)| x.nrows()).sum();
    let mut x_tilde = DMatrix::zeros(rows, d);
    let mut b = DVector::zeros(rows);
    let mut per_task_slices = Vec::with_capacity(blocks.len());
    let mut at = 0;
    for (x, y) in &blocks {
        let n = x.nrows();
        x_tilde.rows_mut(at, n).copy_from(x);
        b.rows_mut(at, n).copy_from(y);
        per_task_slices.push(at..at + n);
        at += n;
    }
    Ok(EffectiveDesign { x_tilde, b, per_task_slices })
}
