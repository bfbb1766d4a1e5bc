//! Gaussian components, the Bures-Wasserstein distance and its gradient.
//!
//! Covariances are parametrized by lower-triangular Cholesky factors with a
//! positive diagonal, `Sigma = L L^T`. Matrix square roots go through a
//! symmetric eigendecomposition with eigenvalues clamped at zero.

mod em;
mod mixture;

pub use em::{em_fit, EmFit, EmOptions};
pub use mixture::{
    gmm_log_density, mw2_cost_matrix, mw2_sq, sample_reparam, GmmDocument, LabelMetric, LabeledGmm,
    ReparamSample,
};
pub(crate) use mixture::sample_reparam_rng;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetry and negativity tolerance, relative to the largest entry.
const PSD_TOL: f64 = 1e-10;

/// `N(mean, chol chol^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::validation("Gaussian with zero dimensions"));
        }
        if chol.shape() != (d, d) {
            return Err(Error::dims(format!("Cholesky factor {:?} for mean of length {d}", chol.shape())));
        }
        if mean.iter().chain(chol.iter()).any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite Gaussian parameters"));
        }
        for i in 0..d {
            if chol[(i, i)] <= 0.0 {
                return Err(Error::validation(format!("Cholesky diagonal entry {i} is not positive")));
            }
            for j in i + 1..d {
                if chol[(i, j)] != 0.0 {
                    return Err(Error::validation("Cholesky factor is not lower-triangular"));
                }
            }
        }
        Ok(Self { mean, chol })
    }

    /// Component from a covariance matrix, factorized by Cholesky.
    pub fn from_covariance(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let sym = (&cov + cov.transpose()) * 0.5;
        let l = nalgebra::Cholesky::new(sym)
            .ok_or_else(|| Error::LinearAlgebra("covariance is not positive definite".into()))?
            .l();
        Self::new(mean, l)
    }

    /// Isotropic `N(mean, sigma^2 I)`.
    pub fn isotropic(mean: DVector<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * sigma)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }
}

fn eigen_checked(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return Err(Error::dims(format!("matrix {:?} is not square", s.shape())));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::LinearAlgebra("non-finite matrix entries".into()));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > PSD_TOL * scale {
        return Err(Error::LinearAlgebra(format!("matrix is not symmetric (max asymmetry {asym:.3e})")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(Error::LinearAlgebra(format!("matrix is indefinite (eigenvalue {min:.3e})")));
    }
    Ok(eig)
}

fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let mapped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| f(l.max(0.0))));
    let out = v * mapped * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// Symmetric PSD square root via eigendecomposition.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen_checked(s)?;
    Ok(spectral_map(&eig, f64::sqrt))
}

/// Square root and inverse square root of a positive definite matrix.
pub(crate) fn sqrt_and_inv_sqrt(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = eigen_checked(s)?;
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || min <= 1e-14 * max {
        return Err(Error::LinearAlgebra("covariance is singular".into()));
    }
    Ok((spectral_map(&eig, f64::sqrt), spectral_map(&eig, |l| 1.0 / l.sqrt())))
}

/// `(A^{1/2} B A^{1/2})^{1/2}` given `A^{1/2}`.
pub(crate) fn cross_sqrt(root_a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = root_a * b * root_a;
    let m = (&m + m.transpose()) * 0.5;
    matrix_sqrt_psd(&m)
}

/// Squared 2-Wasserstein distance between Gaussians,
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn bures_w2_sq(g1: &GaussianComponent, g2: &GaussianComponent) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::dims(format!("Gaussians of dims {} and {}", g1.dim(), g2.dim())));
    }
    let s1 = g1.covariance();
    let s2 = g2.covariance();
    let r1 = matrix_sqrt_psd(&s1)?;
    let cross = cross_sqrt(&r1, &s2)?;
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Gradient of [`bures_w2_sq`] with respect to the first component's mean
/// and (lower-triangular) Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct BuresGradient {
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
}

/// Optimal linear map `T` between centered Gaussians with covariances `s1`
/// and `s2`: `T = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}`.
pub(crate) fn bures_map(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen_checked(s1)?;
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 1e-14 * max.max(1e-300) || min <= 0.0 {
        return Err(Error::LinearAlgebra("covariance of the moving component is singular".into()));
    }
    let root = spectral_map(&eig, f64::sqrt);
    let inv_root = spectral_map(&eig, |l| 1.0 / l.sqrt());
    let cross = cross_sqrt(&root, s2)?;
    let t = &inv_root * cross * &inv_root;
    Ok((&t + t.transpose()) * 0.5)
}

/// Keep the lower triangle (including the diagonal) of a square matrix.
pub(crate) fn lower_triangle(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if j <= i { m[(i, j)] } else { 0.0 })
}

pub fn bures_w2_grad(g1: &GaussianComponent, g2: &GaussianComponent) -> Result<BuresGradient> {
    if g1.dim() != g2.dim() {
        return Err(Error::dims(format!("Gaussians of dims {} and {}", g1.dim(), g2.dim())));
    }
    let d = g1.dim();
    let s1 = g1.covariance();
    let t = bures_map(&s1, &g2.covariance())?;
    let dsigma = DMatrix::identity(d, d) - t;
    let dl = (&dsigma + dsigma.transpose()) * &g1.chol;
    Ok(BuresGradient { mean: (&g1.mean - &g2.mean) * 2.0, chol: lower_triangle(&dl) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g1d(mu: f64, sigma: f64) -> GaussianComponent {
        GaussianComponent::new(DVector::from_vec(vec![mu]), DMatrix::from_element(1, 1, sigma)).unwrap()
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-15);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_psd(&s).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose();
            let r = matrix_sqrt_psd(&s).unwrap();
            assert!((&r * &r - &s).amax() < 1e-8);
            assert!((&r - r.transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn sqrt_rejects_bad_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matrix_sqrt_psd(&indef).is_err());
        // tiny negative eigenvalue is clamped
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert!(matrix_sqrt_psd(&nearly).unwrap()[(1, 1)] == 0.0);
    }

    #[test]
    fn bures_examples() {
        let a = GaussianComponent::isotropic(DVector::zeros(2), 1.0).unwrap();
        assert!(bures_w2_sq(&a, &a).unwrap().abs() < 1e-14);
        let b = GaussianComponent::isotropic(DVector::from_vec(vec![4.0, 0.0]), 1.0).unwrap();
        assert!((bures_w2_sq(&a, &b).unwrap() - 16.0).abs() < 1e-12);
        assert!((bures_w2_sq(&g1d(0.0, 1.0), &g1d(0.0, 2.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(bures_w2_sq(&a, &g1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn bures_one_dimensional_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (m1, m2) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let (s1, s2) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
            let w = bures_w2_sq(&g1d(m1, s1), &g1d(m2, s2)).unwrap();
            let expected: f64 = (m1 - m2).powi(2) + (s1 - s2).powi(2);
            assert!((w - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn gradient_examples() {
        let a = g1d(0.0, 1.0);
        let g = bures_w2_grad(&a, &a).unwrap();
        assert!(g.mean.amax() == 0.0 && g.chol.amax() < 1e-14);
        let g = bures_w2_grad(&a, &g1d(4.0, 1.0)).unwrap();
        assert_eq!(g.mean[0], -8.0);
        // d/dsigma (sigma - sigma')^2
        let g = bures_w2_grad(&g1d(0.0, 3.0), &g1d(0.0, 1.0)).unwrap();
        assert!((g.chol[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_lower_triangular() {
        let l1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.8]);
        let l2 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -0.5, 0.4]);
        let g1 = GaussianComponent::new(DVector::zeros(2), l1).unwrap();
        let g2 = GaussianComponent::new(DVector::zeros(2), l2).unwrap();
        let g = bures_w2_grad(&g1, &g2).unwrap();
        assert_eq!(g.chol[(0, 1)], 0.0);
    }

    #[test]
    fn component_validation() {
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianComponent::new(DVector::zeros(2), upper).is_err());
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(GaussianComponent::new(DVector::zeros(1), neg).is_err());
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let g = GaussianComponent::from_covariance(DVector::zeros(2), cov.clone()).unwrap();
        assert!((g.covariance() - cov).amax() < 1e-14);
    }
}
