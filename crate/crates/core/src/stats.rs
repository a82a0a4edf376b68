//! Small summary statistics shared by the diagnostics and the sweep harness.

use crate::linalg::compensated_sum;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_sd(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / xs.len() as f64).sqrt()
}

/// Standard error of the mean, population sd over `√n`.
pub fn stderr(xs: &[f64]) -> f64 {
    population_sd(xs) / (xs.len() as f64).sqrt()
}

/// Sample standard error (divides by `n − 1`), used for Monte-Carlo estimates.
pub fn sample_stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let var = compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64;
    (var / n as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ranks starting at 1, ties share their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = compensated_sum(a.iter().map(|x| (x - ma) * (x - ma)));
    let vb = compensated_sum(b.iter().map(|y| (y - mb) * (y - mb)));
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation. NaN when either input is constant or shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return f64::NAN;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let num = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let den = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    num / den
}

/// Full double precision: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}
