//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `(1/n) XᵀX`, exactly symmetric.
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows().max(1) as f64;
    let mut q = x.tr_mul(x) / n;
    symmetrize(&mut q);
    q
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// non-increasing order (eigenvectors permuted to match).
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Solve `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} system", a.nrows(), a.ncols())))?;
    Ok(chol.solve(b))
}

pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} system", a.nrows(), a.ncols())))?;
    Ok(chol.solve(b))
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn symmetric_op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Thin SVD `A = U diag(s) Vᵀ` truncated to the numerical rank.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// n × r
    pub u: DMatrix<f64>,
    /// r singular values, non-increasing
    pub s: DVector<f64>,
    /// d × r
    pub v: DMatrix<f64>,
    /// Largest singular value before truncation.
    pub sigma_max: f64,
}

impl ThinSvd {
    /// Singular values below `rel_tol * sigma_max` are discarded.
    pub fn new(a: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let (n, d) = a.shape();
        if n == 0 || d == 0 {
            return Ok(Self::empty(n, d));
        }
        let svd = nalgebra::SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numerical(format!("SVD of {n}x{d} design did not converge")))?;
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma_max = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
        let cutoff = rel_tol * sigma_max;
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| svd.singular_values[i] > cutoff && svd.singular_values[i] > 0.0)
            .collect();
        let r = kept.len();
        let mut uu = DMatrix::zeros(n, r);
        let mut vv = DMatrix::zeros(d, r);
        let mut s = DVector::zeros(r);
        for (j, &i) in kept.iter().enumerate() {
            uu.set_column(j, &u.column(i));
            vv.set_column(j, &v_t.row(i).transpose());
            s[j] = svd.singular_values[i];
        }
        Ok(Self { u: uu, s, v: vv, sigma_max })
    }

    fn empty(n: usize, d: usize) -> Self {
        Self {
            u: DMatrix::zeros(n, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(d, 0),
            sigma_max: 0.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `A† b`
    pub fn pinv_apply(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut coeff = self.u.tr_mul(b);
        for (c, s) in coeff.iter_mut().zip(self.s.iter()) {
            *c /= s;
        }
        &self.v * coeff
    }

    /// `A†` as a dense d × n matrix.
    pub fn pinv(&self) -> DMatrix<f64> {
        let mut vs = self.v.clone();
        for (j, s) in self.s.iter().enumerate() {
            vs.column_mut(j).scale_mut(1.0 / s);
        }
        vs * self.u.transpose()
    }

    /// Project `x` onto the row space of `A` (span of the right singular vectors).
    pub fn project_row_space(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.v * self.v.tr_mul(x)
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of R made positive.
pub fn haar_orthogonal<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
