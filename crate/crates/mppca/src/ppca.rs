//! Single probabilistic PCA model: parameters, densities, posterior moments,
//! and the closed-form maximum-likelihood fit.
//!
//! The model is `t = W x + mu + noise` with `x ~ N(0, I_q)` and isotropic
//! noise `N(0, sigma2 I_d)`, so the marginal over `t` is Gaussian with
//! covariance `C = sigma2 I + W W^T`. All dense-inverse work is routed
//! through the q x q matrix `M = sigma2 I + W^T W` (Woodbury form for
//! `C^-1`, matrix-determinant lemma for `ln|C|`), so costs scale with the
//! latent dimension rather than the observed one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Relative floor applied to noise-variance estimates: the estimate is
/// clamped to at least `SIGMA2_FLOOR_REL * trace(S) / d` so that `C` stays
/// invertible on (near-)noiseless data.
pub const SIGMA2_FLOOR_REL: f64 = 1e-10;

/// Parameters of one probabilistic PCA model.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcaParams {
    w: DMatrix<f64>,
    mu: DVector<f64>,
    sigma2: f64,
}

/// Posterior moments of the latent variable given one observation.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    /// Posterior mean `M^-1 W^T (t - mu)`, length q.
    pub mean: DVector<f64>,
    /// Posterior second moment `sigma2 M^-1 + mean mean^T`, q x q.
    pub second_moment: DMatrix<f64>,
}

/// Precomputed factorization shared by density and statistic evaluations.
///
/// Holds `M^-1` and `ln|C|`; valid only for the parameters it was built from.
#[derive(Debug, Clone)]
pub struct PpcaFactors {
    pub(crate) m_inv: DMatrix<f64>,
    pub(crate) ln_det_c: f64,
}

impl PpcaParams {
    pub fn new(w: DMatrix<f64>, mu: DVector<f64>, sigma2: f64) -> Result<Self> {
        let (d, q) = (w.nrows(), w.ncols());
        if q < 1 || q >= d {
            return Err(Error::InvalidParameter(format!(
                "latent dimension q={q} must satisfy 1 <= q < d={d}"
            )));
        }
        if mu.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mu.len(),
            });
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be positive and finite, got {sigma2}"
            )));
        }
        Ok(Self { w, mu, sigma2 })
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Observed dimension d.
    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    /// Latent dimension q.
    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// `M = sigma2 I + W^T W`, the q x q posterior precision scale.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        let mut m = self.w.transpose() * &self.w;
        for j in 0..self.q() {
            m[(j, j)] += self.sigma2;
        }
        m
    }

    /// Model covariance `C = sigma2 I + W W^T`.
    pub fn model_covariance(&self) -> DMatrix<f64> {
        let d = self.d();
        let mut c = &self.w * self.w.transpose();
        for j in 0..d {
            c[(j, j)] += self.sigma2;
        }
        c
    }

    /// Factorize `M` once for repeated density/statistic evaluation.
    pub fn factors(&self) -> PpcaFactors {
        let m = self.m_matrix();
        let chol = nalgebra::Cholesky::new(m)
            .expect("M = sigma2 I + W^T W is positive definite for sigma2 > 0");
        let ln_det_m: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let ln_det_c = (self.d() - self.q()) as f64 * self.sigma2.ln() + ln_det_m;
        PpcaFactors {
            m_inv: chol.inverse(),
            ln_det_c,
        }
    }

    fn check_dim(&self, t: &DVector<f64>) -> Result<()> {
        if t.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: t.len(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance `(t-mu)^T C^-1 (t-mu)` in Woodbury form.
    pub(crate) fn mahalanobis_sq(&self, f: &PpcaFactors, t: &DVector<f64>) -> f64 {
        let z = t - &self.mu;
        let a = self.w.transpose() * &z;
        (z.dot(&z) - a.dot(&(&f.m_inv * &a))) / self.sigma2
    }

    pub(crate) fn log_density_with(&self, f: &PpcaFactors, t: &DVector<f64>) -> f64 {
        -0.5 * (self.d() as f64 * LN_2PI + f.ln_det_c + self.mahalanobis_sq(f, t))
    }

    /// Log of the marginal Gaussian density of `t`.
    pub fn log_density(&self, t: &DVector<f64>) -> Result<f64> {
        self.check_dim(t)?;
        Ok(self.log_density_with(&self.factors(), t))
    }

    /// Posterior mean and second moment of the latent variable given `t`.
    pub fn posterior_moments(&self, t: &DVector<f64>) -> Result<PosteriorMoments> {
        self.check_dim(t)?;
        let f = self.factors();
        let mean = &f.m_inv * (self.w.transpose() * (t - &self.mu));
        let second_moment = self.sigma2 * &f.m_inv + &mean * mean.transpose();
        Ok(PosteriorMoments {
            mean,
            second_moment,
        })
    }

    /// Sum of per-sample log densities over the rows of `data`.
    pub fn log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if data.ncols() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: data.ncols(),
            });
        }
        let f = self.factors();
        let mut total = 0.0;
        for n in 0..data.nrows() {
            let t = data.row(n).transpose();
            total += self.log_density_with(&f, &t);
        }
        Ok(total)
    }
}

/// Column means computed with an order-independent summation: each column's
/// values are sorted before accumulation, so any row permutation of `data`
/// yields a bit-identical result.
pub fn sample_mean(data: &DMatrix<f64>) -> DVector<f64> {
    let n = data.nrows() as f64;
    DVector::from_fn(data.ncols(), |j, _| {
        let mut col: Vec<f64> = data.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        col.iter().sum::<f64>() / n
    })
}

/// Sample covariance about `mean` (denominator N), order-independent in the
/// same sense as [`sample_mean`].
pub fn sample_covariance(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let (n, d) = (data.nrows(), data.ncols());
    let mut s = DMatrix::zeros(d, d);
    let mut products = Vec::with_capacity(n);
    for j in 0..d {
        for k in j..d {
            products.clear();
            for r in 0..n {
                products.push((data[(r, j)] - mean[j]) * (data[(r, k)] - mean[k]));
            }
            products.sort_by(f64::total_cmp);
            let v = products.iter().sum::<f64>() / n as f64;
            s[(j, k)] = v;
            s[(k, j)] = v;
        }
    }
    s
}

/// Eigen-decomposition of a symmetric matrix with deterministic ordering:
/// eigenvalues descending, exact ties broken by the ascending index of the
/// first nonzero eigenvector component, and each eigenvector sign-normalized
/// so its largest-magnitude component is positive.
pub fn eigen_descending(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = s.clone().symmetric_eigen();
    let d = s.nrows();
    let mut vectors: Vec<DVector<f64>> = (0..d)
        .map(|j| {
            let mut v: DVector<f64> = eig.eigenvectors.column(j).into();
            let mut arg = 0;
            for i in 1..d {
                if v[i].abs() > v[arg].abs() {
                    arg = i;
                }
            }
            if v[arg] < 0.0 {
                v.neg_mut();
            }
            v
        })
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    let first_nonzero = |v: &DVector<f64>| v.iter().position(|&x| x != 0.0).unwrap_or(d);
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then_with(|| first_nonzero(&vectors[a]).cmp(&first_nonzero(&vectors[b])))
    });
    let values: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let columns: Vec<DVector<f64>> = order
        .iter()
        .map(|&j| std::mem::replace(&mut vectors[j], DVector::zeros(0)))
        .collect();
    (values, DMatrix::from_columns(&columns))
}

pub(crate) fn sigma2_floor(trace_s: f64, d: usize) -> f64 {
    (SIGMA2_FLOOR_REL * trace_s / d as f64).max(1e-12)
}

/// Maximum-likelihood PPCA fit via eigen-decomposition of the sample
/// covariance: `mu` is the sample mean, `W = U_q (L_q - sigma2 I)^{1/2}` for
/// the top-q eigenpairs, and `sigma2` is the mean of the d-q discarded
/// eigenvalues (clamped away from zero).
pub fn fit_ppca_closed_form(data: &DMatrix<f64>, q: usize) -> Result<PpcaParams> {
    let (n, d) = (data.nrows(), data.ncols());
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if q < 1 || q >= d {
        return Err(Error::InvalidParameter(format!(
            "latent dimension q={q} must satisfy 1 <= q < d={d}"
        )));
    }
    let mu = sample_mean(data);
    let s = sample_covariance(data, &mu);
    fit_ppca_from_moments(&s, mu, q)
}

/// Closed-form PPCA fit from a covariance matrix and mean.
pub fn fit_ppca_from_moments(
    s: &DMatrix<f64>,
    mu: DVector<f64>,
    q: usize,
) -> Result<PpcaParams> {
    let d = s.nrows();
    let (values, vectors) = eigen_descending(s);
    let residual: f64 = values[q..].iter().map(|v| v.max(0.0)).sum::<f64>() / (d - q) as f64;
    let sigma2 = residual.max(sigma2_floor(s.trace(), d));
    let mut w = DMatrix::zeros(d, q);
    for j in 0..q {
        let scale = (values[j] - sigma2).max(0.0).sqrt();
        w.set_column(j, &(vectors.column(j) * scale));
    }
    PpcaParams::new(w, mu, sigma2)
}
