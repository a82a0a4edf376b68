//! Python bindings: spectrum diagnostics, single solves and preset sweeps.

use metaover::experiments::{preset, run_sweep, seed_key, EnvTemplate, Metric, SpectrumFamily};
use metaover::{
    decompose, effective_dimension, min_norm_solve, population_solution, sample_meta_dataset, Estimator, MetaMethod,
    SolveOptions,
};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: metaover::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

fn method(name: &str, hyper: Option<f64>) -> PyResult<MetaMethod> {
    let m = match (name, hyper) {
        ("erm", _) => MetaMethod::Erm,
        ("maml", Some(alpha)) => MetaMethod::Maml { alpha },
        ("imaml", Some(gamma)) => MetaMethod::Imaml { gamma },
        ("maml" | "imaml", None) => return Err(PyValueError::new_err(format!("{name} needs a hyperparameter"))),
        _ => return Err(PyValueError::new_err(format!("unknown method '{name}'"))),
    };
    m.validate().map_err(err)?;
    Ok(m)
}

/// `(r_k, R_k)` of a non-increasing spectrum.
#[pyfunction]
fn effective_ranks(eigvals: Vec<f64>, k: usize) -> PyResult<(f64, f64)> {
    metaover::effective_ranks(&eigvals, k).map_err(err)
}

/// Smallest `k` with `r_k >= c1 * nm`, or `None`.
#[pyfunction]
#[pyo3(signature = (eigvals, nm, c1 = 1.0))]
fn k_star(eigvals: Vec<f64>, nm: usize, c1: f64) -> PyResult<Option<usize>> {
    effective_dimension(&eigvals, nm, c1).map_err(err)
}

/// Eigenvalue of the adapted weight for covariance eigenvalue `lam`.
#[pyfunction]
#[pyo3(signature = (name, lam, hyper = None))]
fn map_eigenvalue(name: &str, lam: f64, hyper: Option<f64>) -> PyResult<f64> {
    Ok(method(name, hyper)?.map_eigenvalue(lam))
}

#[pyfunction]
#[pyo3(signature = (name, eigvals, hyper = None))]
fn order_preserved(name: &str, eigvals: Vec<f64>, hyper: Option<f64>) -> PyResult<bool> {
    Ok(metaover::order_preserved(method(name, hyper)?, &eigvals))
}

#[pyfunction]
#[pyo3(signature = (name, lambda1, hyper = None))]
fn hyperparameter_safe(name: &str, lambda1: f64, hyper: Option<f64>) -> PyResult<bool> {
    metaover::hyperparameter_safe(method(name, hyper)?, lambda1).map_err(err)
}

/// Draw one meta dataset with covariance `diag(I_d1, beta I_{d-d1})` and
/// return the minimum-norm solution with its risk terms.
#[pyfunction]
#[pyo3(signature = (name, d, n, m, hyper = None, d1 = 0, beta = 1.0, sigma_omega = 0.0, r = 1.0, theta_mean_norm = 1.0, sigma = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    name: &str,
    d: usize,
    n: usize,
    m: usize,
    hyper: Option<f64>,
    d1: usize,
    beta: f64,
    sigma_omega: f64,
    r: f64,
    theta_mean_norm: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let method = method(name, hyper)?;
    let template = EnvTemplate {
        spectrum: SpectrumFamily::Spiked { d1 },
        r,
        theta_mean_norm,
        sigma_noise: sigma,
        ..Default::default()
    };
    let env = template.build(d, beta, sigma_omega).map_err(err)?;
    let dataset = sample_meta_dataset(&env, m, n, &seed_key(seed, 0)).map_err(err)?;
    let sol = min_norm_solve(method, &dataset, &SolveOptions::default()).map_err(err)?;
    let pop = population_solution(method, &env, Estimator::Analytic).map_err(err)?;
    let dec = decompose(&dataset, &sol, &pop).map_err(err)?;
    let delta = &sol.theta0_hat - &pop.theta0_star;

    let out = PyDict::new(py);
    out.set_item("theta0_hat", sol.theta0_hat.iter().copied().collect::<Vec<f64>>())?;
    out.set_item("theta0", pop.theta0_star.iter().copied().collect::<Vec<f64>>())?;
    out.set_item("rank", sol.rank)?;
    out.set_item("train_loss", sol.train_loss)?;
    out.set_item("excess_risk", pop.mean_weight.quad_form(&delta))?;
    out.set_item("cross_task_variance", dec.cross_task_variance)?;
    out.set_item("bias", dec.bias)?;
    out.set_item("per_task_variance", dec.per_task_variance)?;
    Ok(out)
}

/// Run a figure preset without the Monte-Carlo cross-check and return one
/// dict per grid cell with the mean and standard error of the excess risk.
#[pyfunction]
#[pyo3(signature = (name, num_seeds = None))]
fn run_preset<'py>(py: Python<'py>, name: &str, num_seeds: Option<usize>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut config = preset(name).map_err(err)?;
    config.mc = None;
    if let Some(s) = num_seeds {
        config.num_seeds = s;
    }
    let out = py.detach(|| run_sweep(&config)).map_err(err)?;
    let mut rows = Vec::new();
    for s in &out.summaries {
        let row = PyDict::new(py);
        let c = s.cell;
        row.set_item("method", c.method.to_string())?;
        row.set_item("hyperparameter", c.method.hyperparameter())?;
        row.set_item("grid", c.grid)?;
        row.set_item("beta", c.beta)?;
        row.set_item("sigma_omega", c.sigma_omega)?;
        row.set_item("d", c.d)?;
        row.set_item("m", c.m)?;
        row.set_item("n", c.n)?;
        let risk = s.get(Metric::ExcessRisk);
        row.set_item("excess_risk", risk.mean)?;
        row.set_item("excess_risk_stderr", risk.stderr)?;
        row.set_item("failed", s.failed)?;
        rows.push(row);
    }
    Ok(rows)
}

#[pymodule]
fn metaover_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", metaover::VERSION)?;
    m.add_function(wrap_pyfunction!(effective_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(k_star, m)?)?;
    m.add_function(wrap_pyfunction!(map_eigenvalue, m)?)?;
    m.add_function(wrap_pyfunction!(order_preserved, m)?)?;
    m.add_function(wrap_pyfunction!(hyperparameter_safe, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    Ok(())
}
