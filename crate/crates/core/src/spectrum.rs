//! Effective ranks, effective dimension, cross-task heterogeneity and the
//! hyperparameter conditions under which the adapted weight keeps the
//! eigenvalue order of the data covariance.

use serde::{Deserialize, Serialize};

use crate::adaptation::MetaMethod;
use crate::error::{Error, Result};
use crate::meta_solver::{mean_weight, Estimator};
use crate::stats::{fmt_f64, ols_slope, spearman};
use crate::task_model::TaskEnvironment;

/// Default for the `c1` constant in the definition of `k*`.
pub const DEFAULT_C1: f64 = 1.0;

fn check_values(eigvals: &[f64]) -> Result<()> {
    if eigvals.is_empty() {
        return Err(Error::InvalidSpectrum("empty spectrum".into()));
    }
    if let Some((i, v)) = eigvals.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidSpectrum(format!("eigenvalue {} is {v}", i + 1)));
    }
    Ok(())
}

fn check_sorted(eigvals: &[f64]) -> Result<()> {
    check_values(eigvals)?;
    if let Some(i) = eigvals.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::InvalidSpectrum(format!(
            "eigenvalues must be non-increasing, but μ_{} = {} < μ_{} = {}",
            i + 1,
            eigvals[i],
            i + 2,
            eigvals[i + 1]
        )));
    }
    Ok(())
}

/// Compensated suffix sums: `out[k] = Σ_{i ≥ k} f(μ_i)`, with `out[d] = 0`.
fn suffix_sums(eigvals: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; eigvals.len() + 1];
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for (k, &mu) in eigvals.iter().enumerate().rev() {
        let v = f(mu);
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        out[k] = sum + comp;
    }
    out
}

fn ranks_from_sums(tail: f64, tail_sq: f64, head: f64, k: usize) -> Result<(f64, f64)> {
    let big_r = if tail_sq > 0.0 { Some(tail * tail / tail_sq) } else { None };
    if !(head > 0.0) {
        return Err(Error::UndefinedRank { k, tail_rank: big_r });
    }
    // both are positive here: head > 0 implies a nonzero tail
    Ok((tail / head, big_r.expect("nonzero tail")))
}

/// `(r_k, R_k)` for a non-increasing spectrum.
///
/// `r_k` is undefined when `μ_{k+1} = 0`; the error then carries `R_k` if the
/// tail is not identically zero.
pub fn effective_ranks(eigvals: &[f64], k: usize) -> Result<(f64, f64)> {
    check_sorted(eigvals)?;
    if k >= eigvals.len() {
        return Err(Error::InvalidSpectrum(format!("k = {k} out of range for d = {}", eigvals.len())));
    }
    let tail = suffix_sums(&eigvals[k..], |m| m);
    let tail_sq = suffix_sums(&eigvals[k..], |m| m * m);
    ranks_from_sums(tail[0], tail_sq[0], eigvals[k], k)
}

/// `k* = min{k ≥ 0 : r_k ≥ c1·NM}`, or `None` if no `k < d` qualifies.
pub fn effective_dimension(eigvals: &[f64], nm: usize, c1: f64) -> Result<Option<usize>> {
    check_sorted(eigvals)?;
    check_c1(c1)?;
    Ok(SpectrumReport::from_sorted(eigvals.to_vec()).find_k_star(nm, c1))
}

fn check_c1(c1: f64) -> Result<()> {
    if !(c1 >= 1.0) || !c1.is_finite() {
        return Err(Error::InvalidHyperparameter(format!("c1 must be a finite value >= 1, got {c1}")));
    }
    Ok(())
}

/// Effective-rank summary of one spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Non-increasing.
    pub eigvals: Vec<f64>,
    /// `r[k]`, `None` where `μ_{k+1} = 0`.
    pub r: Vec<Option<f64>>,
    /// `big_r[k]`, `None` where the tail is identically zero.
    pub big_r: Vec<Option<f64>>,
    pub op_norm: f64,
    pub trace: f64,
    pub nm: Option<usize>,
    pub c1: f64,
    pub k_star: Option<usize>,
    pub heterogeneity: Option<f64>,
}

impl SpectrumReport {
    /// Sorts the input; entries must be finite and nonnegative.
    pub fn new(mut eigvals: Vec<f64>) -> Result<Self> {
        check_values(&eigvals)?;
        eigvals.sort_by(|a, b| b.total_cmp(a));
        Ok(Self::from_sorted(eigvals))
    }

    fn from_sorted(eigvals: Vec<f64>) -> Self {
        let d = eigvals.len();
        let tail = suffix_sums(&eigvals, |m| m);
        let tail_sq = suffix_sums(&eigvals, |m| m * m);
        let mut r = Vec::with_capacity(d);
        let mut big_r = Vec::with_capacity(d);
        for k in 0..d {
            match ranks_from_sums(tail[k], tail_sq[k], eigvals[k], k) {
                Ok((a, b)) => {
                    r.push(Some(a));
                    big_r.push(Some(b));
                }
                Err(Error::UndefinedRank { tail_rank, .. }) => {
                    r.push(None);
                    big_r.push(tail_rank);
                }
                Err(_) => unreachable!(),
            }
        }
        Self {
            op_norm: eigvals.first().copied().unwrap_or(0.0),
            trace: tail[0],
            eigvals,
            r,
            big_r,
            nm: None,
            c1: DEFAULT_C1,
            k_star: None,
            heterogeneity: None,
        }
    }

    /// Spectrum of `method`'s population weight for `env`.
    pub fn of_weight(method: MetaMethod, env: &TaskEnvironment, estimator: Estimator) -> Result<Self> {
        let w = mean_weight(method, env, estimator)?;
        Self::new(w.eigvals.iter().copied().collect())
    }

    /// Resolve `k*` for sample size `NM`.
    pub fn with_sample_size(mut self, nm: usize, c1: f64) -> Result<Self> {
        check_c1(c1)?;
        self.nm = Some(nm);
        self.c1 = c1;
        self.k_star = self.find_k_star(nm, c1);
        Ok(self)
    }

    pub fn with_heterogeneity(mut self, v: f64) -> Self {
        self.heterogeneity = Some(v);
        self
    }

    fn find_k_star(&self, nm: usize, c1: f64) -> Option<usize> {
        let target = c1 * nm as f64;
        // r_k need not be monotone in k, so no early exit on a decrease
        self.r.iter().position(|r| matches!(r, Some(v) if *v >= target))
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn r0(&self) -> Option<f64> {
        self.r.first().copied().flatten()
    }

    /// `R_{k*}` when `k*` exists.
    pub fn big_r_at_k_star(&self) -> Option<f64> {
        self.k_star.and_then(|k| self.big_r[k])
    }

    /// Number of strictly positive eigenvalues beyond index `k`.
    pub fn tail_rank(&self, k: usize) -> usize {
        self.eigvals[k..].iter().filter(|&&m| m > 0.0).count()
    }

    /// `(r_0/NM, k*/NM, NM/R_{k*})`; entries are `None` when undefined.
    pub fn benign_ratios(&self) -> Option<(Option<f64>, Option<f64>, Option<f64>)> {
        let nm = self.nm? as f64;
        let r0 = self.r0().map(|r| r / nm);
        let ks = self.k_star.map(|k| k as f64 / nm);
        let rk = self.big_r_at_k_star().map(|r| nm / r);
        Some((r0, ks, rk))
    }
}

/// `V = max_{i,m} |λ̄_i − λ_{m,i}| / λ̄_i`, with `λ̄` the arithmetic mean over
/// tasks. All spectra must be indexed by the same shared eigenvectors.
pub fn heterogeneity(spectra: &[Vec<f64>]) -> Result<f64> {
    let first = spectra.first().ok_or_else(|| Error::InvalidSpectrum("no spectra given".into()))?;
    let d = first.len();
    for s in spectra {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
        check_values(s)?;
    }
    let m = spectra.len() as f64;
    let mut v = 0.0_f64;
    for i in 0..d {
        let bar = crate::linalg::compensated_sum(spectra.iter().map(|s| s[i])) / m;
        if bar == 0.0 {
            continue;
        }
        for s in spectra {
            v = v.max((bar - s[i]).abs() / bar);
        }
    }
    Ok(v)
}

/// Eigenvalue of the population weight as a function of the covariance eigenvalue.
pub fn eig_map(method: MetaMethod, lambda: f64) -> f64 {
    method.map_eigenvalue(lambda)
}

/// Mapped spectrum, re-sorted non-increasing.
pub fn mapped_spectrum(method: MetaMethod, eigvals: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = eigvals.iter().map(|&l| eig_map(method, l)).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// Whether the eigenvalue map is nondecreasing on `[0, λ_1]`.
///
/// MAML: derivative `(1 − αλ)(1 − 3αλ)`, so for `α > 0` the map is monotone
/// up to `λ = 1/(3α)`. iMAML: derivative `(1 + λ/γ)⁻³(1 − λ/γ)`.
pub fn order_preserved(method: MetaMethod, eigvals: &[f64]) -> bool {
    let lambda1 = eigvals.iter().copied().fold(0.0_f64, f64::max);
    match method {
        MetaMethod::Erm => true,
        MetaMethod::Maml { alpha } => alpha <= 0.0 || 3.0 * alpha * lambda1 <= 1.0,
        MetaMethod::Imaml { gamma } => gamma >= lambda1,
    }
}

/// The sufficient condition under which the effective ranks of `W` stay
/// within constant factors of those of the data covariance:
/// `0 ≤ α ≤ 1/(3λ_1)` for MAML and `γ ≥ λ_1` for iMAML.
pub fn hyperparameter_safe(method: MetaMethod, lambda1: f64) -> Result<bool> {
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::InvalidSpectrum(format!("λ_1 must be positive, got {lambda1}")));
    }
    Ok(match method {
        MetaMethod::Erm => true,
        MetaMethod::Maml { alpha } => alpha >= 0.0 && 3.0 * alpha * lambda1 <= 1.0,
        MetaMethod::Imaml { gamma } => gamma >= lambda1,
    })
}

/// One point of a scaling sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub d: usize,
    pub n: usize,
    pub m: usize,
}

impl ScalePoint {
    pub fn nm(&self) -> usize {
        self.n * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignPoint {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub ratio_r0: f64,
    pub ratio_kstar: f64,
    pub ratio_big_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenignVerdict {
    TrendingBenign,
    NotBenign,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignDiagnostic {
    pub points: Vec<BenignPoint>,
    /// Points dropped from the scan, with the reason.
    pub excluded: Vec<(ScalePoint, String)>,
    pub verdict: BenignVerdict,
    /// Spearman ρ of each ratio against NM, in the order r0, k*, R.
    pub spearman: [f64; 3],
    /// Least-squares slope of each ratio against ln NM.
    pub slopes: [f64; 3],
}

/// Spearman ρ every ratio must reach for a benign verdict.
pub const BENIGN_RHO: f64 = -0.8;

/// Evaluate the three benign-overfitting ratios on `W = E[W_m]` along a
/// scaling sequence. `env_for` builds the environment at each point.
pub fn benign_scan<F>(points: &[ScalePoint], env_for: F, method: MetaMethod, c1: f64) -> Result<BenignDiagnostic>
where
    F: Fn(&ScalePoint) -> Result<TaskEnvironment>,
{
    check_c1(c1)?;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    let mut degenerate = false;
    for p in points {
        if p.nm() >= p.d {
            excluded.push((*p, format!("NM = {} is not below d = {}", p.nm(), p.d)));
            continue;
        }
        let env = env_for(p)?;
        if env.dim() != p.d {
            return Err(Error::DimensionMismatch { expected: p.d, got: env.dim() });
        }
        let report = SpectrumReport::of_weight(method, &env, Estimator::Analytic)?.with_sample_size(p.nm(), c1)?;
        let (r0, ks, rk) = report.benign_ratios().expect("sample size set");
        match (r0, ks, rk) {
            (Some(r0), Some(ks), Some(rk)) => kept.push(BenignPoint {
                d: p.d,
                n: p.n,
                m: p.m,
                ratio_r0: r0,
                ratio_kstar: ks,
                ratio_big_r: rk,
            }),
            _ => {
                degenerate = true;
                excluded.push((*p, "k* or R_{k*} undefined".into()));
            }
        }
    }
    let nm: Vec<f64> = kept.iter().map(|p| (p.n * p.m) as f64).collect();
    let ln_nm: Vec<f64> = nm.iter().map(|x| x.ln()).collect();
    let series = [
        kept.iter().map(|p| p.ratio_r0).collect::<Vec<_>>(),
        kept.iter().map(|p| p.ratio_kstar).collect::<Vec<_>>(),
        kept.iter().map(|p| p.ratio_big_r).collect::<Vec<_>>(),
    ];
    let (rho, slopes) = if kept.len() >= 2 {
        (series.clone().map(|s| spearman(&nm, &s)), series.map(|s| ols_slope(&ln_nm, &s)))
    } else {
        ([f64::NAN; 3], [f64::NAN; 3])
    };
    let verdict = if degenerate || kept.len() < 4 {
        BenignVerdict::Inconclusive
    } else if rho.iter().all(|r| *r <= BENIGN_RHO) {
        BenignVerdict::TrendingBenign
    } else {
        BenignVerdict::NotBenign
    };
    Ok(BenignDiagnostic { points: kept, excluded, verdict, spearman: rho, slopes })
}

/// Parse a spectrum file: one eigenvalue per line, non-increasing.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_spectrum_csv(text: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::SpectrumParse { line, msg: format!("not a number: {s:?}") })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::SpectrumParse { line, msg: format!("eigenvalue must be finite and nonnegative, got {v}") });
        }
        if let Some(&prev) = out.last() {
            if v > prev {
                return Err(Error::SpectrumParse { line, msg: format!("{v} exceeds the previous value {prev}") });
            }
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::SpectrumParse { line: 0, msg: "no eigenvalues found".into() });
    }
    Ok(out)
}

pub fn write_spectrum_csv(eigvals: &[f64]) -> String {
    let mut sorted = eigvals.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().map(|v| fmt_f64(*v) + "\n").collect()
}
