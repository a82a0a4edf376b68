//! Gaussian expectations: Gauss–Hermite for smooth integrands, panelled
//! tanh-sinh for functions of the folded scale `|1 + ω|`.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights for `∫ f(x) e^{-x²} dx ≈ Σ wᵢ f(xᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 3e-16 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    /// `E[f(ω)]` for `ω ~ N(0, σ²)`.
    pub fn normal_expectation<F: Fn(f64) -> f64>(&self, sigma: f64, f: F) -> f64 {
        let s = std::f64::consts::SQRT_2 * sigma;
        let total = crate::linalg::compensated_sum(self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(s * x)));
        total / PI.sqrt()
    }
}

/// The 64-point rule used for per-task scale expectations.
pub fn gauss_hermite_64() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(64))
}

/// `E[f(|1 + ω|)]` for `ω ~ N(0, σ²)`, integrated over `c = |1 + ω|`
/// against the folded-normal density. `f` may vary sharply or have a kink
/// in `ω` at `-1`, which defeats Gauss–Hermite; `breaks` are extra panel
/// boundaries where the caller knows `f` changes on a short scale.
pub fn folded_normal_expectation<F: Fn(f64) -> f64>(sigma: f64, breaks: &[f64], f: F) -> f64 {
    if sigma == 0.0 {
        return f(1.0);
    }
    let density = |c: f64| {
        let a = (c - 1.0) / sigma;
        let b = (c + 1.0) / sigma;
        ((-0.5 * a * a).exp() + (-0.5 * b * b).exp()) / (sigma * (2.0 * PI).sqrt())
    };
    let top = 1.0 + 12.0 * sigma;
    let mut edges: Vec<f64> = vec![0.0, 1.0 - 3.0 * sigma, 1.0 - sigma, 1.0, 1.0 + sigma, 1.0 + 3.0 * sigma, top];
    edges.extend(breaks.iter().copied());
    edges.retain(|b| b.is_finite() && *b >= 0.0 && *b <= top);
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    // scale for the absolute tolerance
    let rough = gauss_hermite_64().normal_expectation(sigma, |w| f((1.0 + w).abs()).abs());
    let tol = 1e-15 * rough.max(f64::MIN_POSITIVE);
    let parts = edges.windows(2).map(|p| {
        quadrature::double_exponential::integrate(|c| f(c) * density(c), p[0], p[1], tol).integral
    });
    crate::linalg::compensated_sum(parts)
}
