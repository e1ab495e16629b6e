//! Jointly Gaussian vectors built as affine images of a standard normal
//! basis, with exact conditioning.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// A random vector `mean + loading * xi`, `xi ~ N(0, I)`.
///
/// Every row is one scalar variable; rows can be stacked and combined
/// linearly, which is all that covariance propagation through linear
/// dynamics needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub mean: DVector<f64>,
    pub loading: DMatrix<f64>,
}

impl Affine {
    pub fn constant(mean: DVector<f64>, basis_dim: usize) -> Self {
        let rows = mean.len();
        Self {
            mean,
            loading: DMatrix::zeros(rows, basis_dim),
        }
    }

    pub fn zeros(rows: usize, basis_dim: usize) -> Self {
        Self::constant(DVector::zeros(rows), basis_dim)
    }

    pub fn rows(&self) -> usize {
        self.mean.len()
    }

    pub fn basis_dim(&self) -> usize {
        self.loading.ncols()
    }

    /// `M * self`.
    pub fn transform(&self, m: &DMatrix<f64>) -> Self {
        Self {
            mean: m * &self.mean,
            loading: m * &self.loading,
        }
    }

    /// `v^T self` as a one-row vector.
    pub fn project(&self, v: &DVector<f64>) -> Self {
        Self {
            mean: DVector::from_element(1, v.dot(&self.mean)),
            loading: DMatrix::from_iterator(1, self.basis_dim(), self.loading.tr_mul(v).iter().copied()),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            mean: &self.mean + &other.mean,
            loading: &self.loading + &other.loading,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            mean: &self.mean * s,
            loading: &self.loading * s,
        }
    }

    pub fn shift(&self, offset: &DVector<f64>) -> Self {
        Self {
            mean: &self.mean + offset,
            loading: self.loading.clone(),
        }
    }

    /// Adds `factor * xi[start..start + factor.ncols()]`.
    pub fn with_noise(&self, start: usize, factor: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        let mut block = out
            .loading
            .view_mut((0, start), (factor.nrows(), factor.ncols()));
        block += factor;
        out
    }

    pub fn stack(parts: &[&Affine]) -> Self {
        let basis = parts.first().map_or(0, |p| p.basis_dim());
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut mean = DVector::zeros(rows);
        let mut loading = DMatrix::zeros(rows, basis);
        let mut at = 0;
        for p in parts {
            mean.rows_mut(at, p.rows()).copy_from(&p.mean);
            loading.rows_mut(at, p.rows()).copy_from(&p.loading);
            at += p.rows();
        }
        Self { mean, loading }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.loading * self.loading.transpose()
    }

    pub fn cross_covariance(&self, other: &Self) -> DMatrix<f64> {
        &self.loading * other.loading.transpose()
    }

    pub fn joint(&self, labels: Vec<String>) -> GaussianJoint {
        GaussianJoint {
            mean: self.mean.clone(),
            cov: self.covariance(),
            labels,
        }
    }
}

/// Mean, covariance, and coordinate names of a Gaussian vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianJoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl GaussianJoint {
    /// Largest absolute difference over all mean and covariance entries.
    pub fn max_deviation(&self, other: &Self) -> f64 {
        assert_eq!(self.labels, other.labels, "joints describe different variables");
        let dm = (&self.mean - &other.mean).amax();
        let dc = (&self.cov - &other.cov).amax();
        dm.max(dc)
    }
}

/// Symmetric PSD square root factor `F` with `F F^T = cov`. Tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Conditional distribution of `target` given `observed = value`, for a
/// nonsingular observation covariance.
pub fn condition_on(target: &Affine, observed: &Affine, value: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s_oo = observed.covariance();
    let s_to = target.cross_covariance(observed);
    let chol = s_oo.cholesky().ok_or(Error::SingularConditioning)?;
    // gain = S_to S_oo^{-1}
    let gain = chol.solve(&s_to.transpose()).transpose();
    let mean = &target.mean + &gain * (value - &observed.mean);
    let cov = target.covariance() - &gain * s_to.transpose();
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Best linear predictor of `target` from `regressor`:
/// `target = coef * regressor + intercept + residual` with the residual
/// independent of the regressor and covariance `residual_cov`. A singular
/// regressor covariance is handled with the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct Regression {
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub residual_cov: DMatrix<f64>,
}

pub fn regress(target: &Affine, regressor: &Affine) -> Regression {
    let s_rr = regressor.covariance();
    let s_tr = target.cross_covariance(regressor);
    let scale = s_rr.amax().max(f64::MIN_POSITIVE);
    let pinv = s_rr
        .pseudo_inverse(1e-12 * scale)
        .expect("pseudo-inverse tolerance is nonnegative");
    let coef = &s_tr * pinv;
    let intercept = &target.mean - &coef * &regressor.mean;
    let residual = target.covariance() - &coef * s_tr.transpose();
    Regression {
        coef,
        intercept,
        residual_cov: (&residual + residual.transpose()) * 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bivariate_conditioning() {
        // X = xi0, Y = X + 0.5 xi1: E[X|Y=y] = y/1.25, Var = 1 - 1/1.25.
        let x = Affine {
            mean: DVector::zeros(1),
            loading: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let y = Affine {
            mean: DVector::zeros(1),
            loading: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        };
        let (m, k) = condition_on(&x, &y, &DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(m[0], 1.6, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(0, 0)], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn singular_observation_is_reported() {
        let y = Affine::zeros(1, 2);
        assert!(matches!(
            condition_on(&y, &y, &DVector::zeros(1)),
            Err(Error::SingularConditioning)
        ));
    }

    #[test]
    fn regression_with_duplicate_regressor() {
        // Regressor (X, X) is singular; target 2X + noise.
        let x = Affine {
            mean: DVector::from_element(1, 1.0),
            loading: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let reg = Affine::stack(&[&x, &x]);
        let t = x.scale(2.0).with_noise(1, &DMatrix::from_element(1, 1, 0.3));
        let r = regress(&t, &reg);
        assert_abs_diff_eq!(r.coef[(0, 0)] + r.coef[(0, 1)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.intercept[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.residual_cov[(0, 0)], 0.09, epsilon = 1e-12);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let f = psd_factor(&c);
        assert!((&f * f.transpose() - c).amax() < 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&singular);
        assert!((&f * f.transpose() - singular).amax() < 1e-14);
    }
}
