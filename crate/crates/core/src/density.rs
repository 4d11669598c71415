//! Multivariate power exponential (MPE) density.
//!
//! `f(x) = k |Sigma|^{-1/2} exp(-delta(x)^beta / 2)` where `delta` is the
//! squared Mahalanobis distance and
//! `k = p Gamma(p/2) / (pi^{p/2} Gamma(1 + p/(2 beta)) 2^{1 + p/(2 beta)})`.
//! `beta = 1` is the Gaussian, `beta < 1` is leptokurtic with heavy tails,
//! `beta > 1` is platykurtic with thin tails.
//!
//! All gamma arithmetic is in log space.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};

use crate::error::{FitError, ModelError};
use crate::linalg::{self, log_sum_exp, pow_nonneg};
use crate::model::{ComponentScale, Dataset, MixtureParams};
use crate::special::{ln_gamma, ln_gamma_ratio};

/// A single MPE component with a cached inverse and log-determinant.
#[derive(Debug, Clone)]
pub struct MpeComponent {
    pub mean: DVector<f64>,
    pub sigma_inverse: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub beta: f64,
}

impl MpeComponent {
    pub fn new(mean: DVector<f64>, sigma: &DMatrix<f64>, beta: f64) -> Result<Self, ModelError> {
        let p = mean.len();
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(ModelError::DimensionMismatch {
                expected: p,
                actual: sigma.nrows(),
            });
        }
        if !(beta > 0.0) {
            return Err(ModelError::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let chol = nalgebra::Cholesky::new(linalg::symmetrize(sigma))
            .ok_or_else(|| ModelError::InvalidParameter("scale matrix is not positive definite".into()))?;
        let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sigma_inverse = linalg::symmetrize(&chol.inverse());
        Ok(Self {
            mean,
            sigma_inverse,
            log_det_sigma,
            beta,
        })
    }

    pub fn from_decomposition(mean: DVector<f64>, scale: &ComponentScale, beta: f64) -> Self {
        Self {
            mean,
            sigma_inverse: scale.sigma_inverse(),
            log_det_sigma: scale.log_det(),
            beta,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Squared Mahalanobis distance `(x - mu)' Sigma^{-1} (x - mu)`.
pub fn mahalanobis(x: &DVector<f64>, comp: &MpeComponent) -> Result<f64, ModelError> {
    if x.len() != comp.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: comp.dim(),
            actual: x.len(),
        });
    }
    let r = x - &comp.mean;
    Ok((r.transpose() * &comp.sigma_inverse * &r)[(0, 0)].max(0.0))
}

/// `log k(p, beta)`.
pub fn log_normalizing_constant(p: usize, beta: f64) -> f64 {
    let p = p as f64;
    let e = p / (2.0 * beta);
    p.ln() + ln_gamma(p / 2.0) - 0.5 * p * PI.ln() - ln_gamma(1.0 + e) - (1.0 + e) * LN_2
}

/// Log-density from a precomputed squared Mahalanobis distance.
#[inline]
pub fn log_density_from_delta(delta: f64, log_k: f64, log_det_sigma: f64, beta: f64) -> f64 {
    log_k - 0.5 * log_det_sigma - 0.5 * pow_nonneg(delta, beta)
}

pub fn log_density(x: &DVector<f64>, comp: &MpeComponent) -> Result<f64, ModelError> {
    let delta = mahalanobis(x, comp)?;
    Ok(log_density_from_delta(
        delta,
        log_normalizing_constant(comp.dim(), comp.beta),
        comp.log_det_sigma,
        comp.beta,
    ))
}

/// Factor `c` with `Cov(X) = c Sigma`.
pub fn covariance_factor(p: usize, beta: f64) -> f64 {
    let p = p as f64;
    (LN_2 / beta + ln_gamma_ratio(p / (2.0 * beta), 1.0 / beta) - p.ln()).exp()
}

pub fn covariance_of(sigma: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    sigma * covariance_factor(sigma.nrows(), beta)
}

/// Multidimensional (Mardia) excess kurtosis of the MPE distribution.
pub fn kurtosis_coefficient(p: usize, beta: f64) -> f64 {
    let pf = p as f64;
    let a = pf / (2.0 * beta);
    let c = 1.0 / beta;
    let log_ratio = 2.0 * pf.ln() + ln_gamma_ratio(a + c, c) - ln_gamma_ratio(a, c);
    let base = pf * (pf + 2.0);
    // exp(log_ratio) - base, written to keep relative precision near beta = 1
    base * (log_ratio - base.ln()).exp_m1()
}

/// `N x G` matrix of squared Mahalanobis distances `delta_ig`.
pub fn mahalanobis_matrix(x: &DMatrix<f64>, params: &MixtureParams) -> DMatrix<f64> {
    let (n, g) = (x.nrows(), params.groups());
    let mut out = DMatrix::zeros(n, g);
    for k in 0..g {
        let c = params.scale.component(k);
        let d = linalg::mahalanobis_rows(x, &params.means[k], &c.eigenvalues(), &c.orientation);
        out.set_column(k, &d);
    }
    out
}

/// `N x G` matrix of `log pi_g + log f(x_i | theta_g)`.
pub fn weighted_log_densities(x: &DMatrix<f64>, params: &MixtureParams) -> DMatrix<f64> {
    let delta = mahalanobis_matrix(x, params);
    let p = params.dim();
    let mut out = delta;
    for k in 0..params.groups() {
        let beta = params.betas[k];
        let log_k = log_normalizing_constant(p, beta);
        let log_det = params.scale.component(k).log_det();
        let log_w = params.weights[k].ln();
        for v in out.column_mut(k).iter_mut() {
            *v = log_w + log_density_from_delta(*v, log_k, log_det, beta);
        }
    }
    out
}

/// Observed-data log-likelihood `sum_i log sum_g pi_g f(x_i)`.
pub fn mixture_log_likelihood(data: &Dataset, params: &MixtureParams) -> Result<f64, FitError> {
    let lw = weighted_log_densities(&data.x, params);
    let mut total = 0.0;
    for i in 0..lw.nrows() {
        let row = log_sum_exp(lw.row(i).iter().copied());
        if row == f64::NEG_INFINITY {
            return Err(FitError::AllComponentsUnderflow { row: i });
        }
        total += row;
    }
    if !total.is_finite() {
        return Err(FitError::NonFiniteLikelihood { iteration: 0 });
    }
    Ok(total)
}
