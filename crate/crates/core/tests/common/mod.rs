//! Reference implementations used only by the tests. They favour the most
//! literal formula over speed and share no code paths with the library.
#![allow(dead_code)]

use metaover::{MetaDataset, MetaMethod};
use nalgebra::{DMatrix, DVector};

/// `X̃_m` and `b_m` built straight from the adaptation formulas with explicit
/// matrix inverses.
pub fn literal_design(method: MetaMethod, ds: &MetaDataset) -> (DMatrix<f64>, DVector<f64>) {
    let d = ds.dim();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut targets = Vec::new();
    for t in &ds.tasks {
        let n_tr = t.x_train.nrows() as f64;
        let q = t.x_train.transpose() * &t.x_train / n_tr;
        let (a, shift) = match method {
            MetaMethod::Erm => (DMatrix::identity(d, d), DVector::zeros(d)),
            MetaMethod::Maml { alpha } => {
                let a = DMatrix::identity(d, d) - q * alpha;
                (a, t.x_train.transpose() * &t.y_train * (alpha / n_tr))
            }
            MetaMethod::Imaml { gamma } => {
                let p = DMatrix::identity(d, d) + q / gamma;
                let inv = p.try_inverse().expect("I + Q/gamma is invertible");
                let shift = &inv * (t.x_train.transpose() * &t.y_train) / (n_tr * gamma);
                (inv, shift)
            }
        };
        for i in 0..t.x_val.nrows() {
            let x = t.x_val.row(i).transpose();
            rows.push(a.transpose() * &x);
            targets.push(t.y_val[i] - x.dot(&shift));
        }
    }
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    (x, DVector::from_vec(targets))
}

/// Meta-training objective evaluated by adapting and then scoring on the
/// validation split, one task at a time.
pub fn literal_objective(method: MetaMethod, ds: &MetaDataset, theta0: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for t in &ds.tasks {
        let n_tr = t.x_train.nrows() as f64;
        let adapted = match method {
            MetaMethod::Erm => theta0.clone(),
            MetaMethod::Maml { alpha } => {
                let grad = t.x_train.transpose() * (&t.x_train * theta0 - &t.y_train) / n_tr;
                theta0 - grad * alpha
            }
            MetaMethod::Imaml { gamma } => gd_regularized(&t.x_train, &t.y_train, theta0, gamma),
        };
        total += (&t.x_val * adapted - &t.y_val).norm_squared();
    }
    total / ds.num_tasks() as f64
}

/// `argmin (1/2N)‖Xθ − y‖² + (γ/2)‖θ − θ0‖²` by plain gradient descent.
pub fn gd_regularized(x: &DMatrix<f64>, y: &DVector<f64>, theta0: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let n = x.nrows() as f64;
    let lip = largest_eigenvalue(&(x.transpose() * x / n)) + gamma;
    let step = 1.0 / lip;
    let mut theta = theta0.clone();
    for _ in 0..200_000 {
        let g = x.transpose() * (x * &theta - y) / n + (&theta - theta0) * gamma;
        if g.norm() < 1e-13 * (1.0 + theta.norm()) {
            break;
        }
        theta -= g * step;
    }
    theta
}

/// Power iteration on a symmetric positive semidefinite matrix.
pub fn largest_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut v = DVector::from_fn(a.nrows(), |i, _| 1.0 + (i as f64).sin());
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w) / v.norm_squared();
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Gradient descent from zero on `(1/M)‖Xθ − b‖²`, stopped once the gradient
/// norm drops below `grad_tol`. Converges to the minimum-norm minimizer.
pub fn gd_from_zero(x: &DMatrix<f64>, b: &DVector<f64>, m: usize, grad_tol: f64) -> (DVector<f64>, usize) {
    let scale = 2.0 / m as f64;
    let gram = x.transpose() * x;
    let step = 1.0 / (scale * largest_eigenvalue(&gram));
    let xtb = x.transpose() * b;
    let mut theta = DVector::zeros(x.ncols());
    for it in 0..5_000_000 {
        let g = (&gram * &theta - &xtb) * scale;
        if g.norm() <= grad_tol {
            return (theta, it);
        }
        theta -= g * step;
    }
    panic!("gradient descent did not reach {grad_tol}");
}

/// Minimum-norm solution through the normal equations of the row space,
/// `Xᵀ(XXᵀ)⁻¹b`; valid only for full row rank.
pub fn row_space_solve(x: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let g = x * x.transpose();
    x.transpose() * g.cholesky().expect("full row rank").solve(b)
}

/// Least squares through the normal equations; valid only for full column rank.
pub fn column_space_solve(x: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let g = x.transpose() * x;
    g.cholesky().expect("full column rank").solve(&(x.transpose() * b))
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// `(r_k, R_k)` by direct summation over the tail, descending input.
pub fn brute_ranks(mu: &[f64], k: usize) -> Option<(f64, f64)> {
    let tail = &mu[k..];
    if tail.is_empty() || tail[0] == 0.0 {
        return None;
    }
    let mut s = 0.0;
    let mut s2 = 0.0;
    for v in tail.iter().rev() {
        s += v;
        s2 += v * v;
    }
    Some((s / tail[0], s * s / s2))
}

/// Smallest `k` with `r_k ≥ c1·nm`, scanning every `k`.
pub fn brute_k_star(mu: &[f64], nm: usize, c1: f64) -> Option<usize> {
    (0..mu.len()).find(|&k| matches!(brute_ranks(mu, k), Some((r, _)) if r >= c1 * nm as f64))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard error of the mean.
pub fn stderr(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}
