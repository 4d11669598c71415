//! Fixed-point scale iteration versus the GEM scale update.
//!
//! For a single component with `mu` and `beta` held fixed, the stationarity
//! condition of the log-likelihood in `Sigma` gives the map
//! `f(Sigma) = (beta/N) sum_i delta_i^{beta-1} (x_i - mu)(x_i - mu)'`.
//! Iterating `f` is only monotone for `beta <= 1`; at a fixed point the
//! trace of its Jacobian is `p (1 - beta)`, so it oscillates with growing
//! amplitude once `beta > 2`. The GEM side uses the MM scale update and is
//! monotone for every `beta`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::density::{log_density_from_delta, log_normalizing_constant};
use crate::linalg::{self, pow_nonneg};
use crate::model::{ComponentScale, Responsibilities};
use crate::sampler;
use crate::scale::{self, ScaleOptions, ScatterCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    FixedPoint,
    Gem,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FixedPoint => "fixed_point",
            Method::Gem => "gem",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub method: Method,
    pub beta: f64,
    pub p: usize,
    /// Log-likelihood after each iteration (index 0 is the starting value).
    pub loglik: Vec<f64>,
    pub diverged: bool,
}

/// Squared distances `r_i' Sigma^{-1} r_i` through an LU solve, so the map
/// can also be evaluated at non-symmetric perturbations of `Sigma`.
fn distances(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Option<DVector<f64>> {
    let r = linalg::centered(x, mu);
    let lu = sigma.clone().lu();
    let z = lu.solve(&r.transpose())?;
    Some(DVector::from_fn(x.nrows(), |i, _| r.row(i).dot(&z.column(i).transpose())))
}

/// One application of the fixed-point map. Non-finite entries are returned
/// as-is for the caller to record.
pub fn fixed_point_sigma_step(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let p = mu.len();
    let Some(delta) = distances(x, mu, sigma) else {
        return DMatrix::from_element(p, p, f64::NAN);
    };
    let r = linalg::centered(x, mu);
    let w: Vec<f64> = delta
        .iter()
        .map(|&d| if d > 0.0 { beta * pow_nonneg(d, beta - 1.0) } else { 0.0 })
        .collect();
    let mut scaled = r.clone();
    for (i, wi) in w.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*wi);
    }
    r.transpose() * scaled / x.nrows() as f64
}

/// Single-component log-likelihood; `NaN` when `sigma` is not SPD.
pub fn loglik(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, beta: f64) -> f64 {
    if sigma.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let Some(chol) = linalg::symmetrize(sigma).cholesky() else {
        return f64::NAN;
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = linalg::centered(x, mu);
    let z = chol.solve(&r.transpose());
    let log_k = log_normalizing_constant(mu.len(), beta);
    (0..x.nrows())
        .map(|i| log_density_from_delta(r.row(i).dot(&z.column(i).transpose()).max(0.0), log_k, log_det, beta))
        .sum()
}

/// `true` if any value is non-finite or the trace falls on five
/// consecutive steps by strictly growing amounts.
pub fn detect_divergence(trace: &[f64]) -> bool {
    if trace.iter().any(|v| !v.is_finite()) {
        return true;
    }
    let drops: Vec<f64> = trace.windows(2).map(|w| w[0] - w[1]).collect();
    drops
        .windows(5)
        .any(|d| d.iter().all(|v| *v > 0.0) && d.windows(2).all(|w| w[1] > w[0]))
}

fn gem_step(x: &DMatrix<f64>, mu: &DVector<f64>, current: &ComponentScale, beta: f64, opts: &ScaleOptions) -> ComponentScale {
    let tau = Responsibilities {
        tau: DMatrix::from_element(x.nrows(), 1, 1.0),
    };
    let cache = ScatterCache::new(x, &tau, std::slice::from_ref(mu));
    let raw = scale::update_vvv(&cache, current, beta, 0, opts);
    match scale::finalize(crate::model::ScaleStructure::VVV, vec![raw], opts.eigen_floor) {
        Ok(u) => u.scale.components.into_iter().next().expect("one component"),
        Err(_) => current.clone(),
    }
}

/// Run both updates from `Sigma = I` for `iterations` steps.
pub fn compare_trajectories(
    x: &DMatrix<f64>,
    mu: &DVector<f64>,
    beta: f64,
    iterations: usize,
) -> (TrajectoryRecord, TrajectoryRecord) {
    let p = mu.len();
    let start = DMatrix::<f64>::identity(p, p);

    let mut fp = vec![loglik(x, mu, &start, beta)];
    let mut sigma = start.clone();
    for _ in 0..iterations {
        sigma = fixed_point_sigma_step(x, mu, &sigma, beta);
        let l = loglik(x, mu, &sigma, beta);
        fp.push(l);
        if !l.is_finite() {
            break;
        }
    }

    let opts = ScaleOptions::default();
    let mut comp = ComponentScale::spherical(1.0, p);
    let mut gem = vec![loglik(x, mu, &start, beta)];
    for _ in 0..iterations {
        comp = gem_step(x, mu, &comp, beta, &opts);
        gem.push(loglik(x, mu, &comp.sigma(), beta));
    }

    (
        TrajectoryRecord {
            method: Method::FixedPoint,
            beta,
            p,
            diverged: detect_divergence(&fp),
            loglik: fp,
        },
        TrajectoryRecord {
            method: Method::Gem,
            beta,
            p,
            diverged: detect_divergence(&gem),
            loglik: gem,
        },
    )
}

/// Locate the stationary `Sigma` for fixed `mu` and `beta`: the fixed-point
/// map is iterated from the sample scatter (it contracts for
/// `0 < beta < 2`), with GEM scale updates as the fallback. Converged when
/// the relative change drops below `1e-13`.
pub fn solve_fixed_point(x: &DMatrix<f64>, mu: &DVector<f64>, beta: f64, max_iter: usize) -> Option<DMatrix<f64>> {
    let r = linalg::centered(x, mu);
    let start = r.transpose() * &r / x.nrows() as f64;
    let mut sigma = start.clone();
    for _ in 0..max_iter {
        let next = linalg::symmetrize(&fixed_point_sigma_step(x, mu, &sigma, beta));
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let change = (&next - &sigma).norm() / next.norm();
        sigma = next;
        if change < 1e-13 {
            return Some(sigma);
        }
    }
    let opts = ScaleOptions::default();
    let (vals, vecs) = linalg::sorted_symmetric_eigen(&start);
    let mut comp = ComponentScale::from_eigen(&vals, vecs);
    for _ in 0..max_iter {
        let next = gem_step(x, mu, &comp, beta, &opts);
        let change = (next.sigma() - comp.sigma()).norm() / next.sigma().norm();
        comp = next;
        if change < 1e-13 {
            return Some(comp.sigma());
        }
    }
    None
}

/// Trace of the Jacobian of `vec f` at `sigma_hat` by central differences
/// on each entry of `Sigma` separately.
pub fn jacobian_trace_at_fixed_point(x: &DMatrix<f64>, mu: &DVector<f64>, sigma_hat: &DMatrix<f64>, beta: f64) -> f64 {
    let p = mu.len();
    let h = 1e-6 * sigma_hat.amax().max(1e-12);
    let mut trace = 0.0;
    for a in 0..p {
        for b in 0..p {
            let mut plus = sigma_hat.clone();
            plus[(a, b)] += h;
            let mut minus = sigma_hat.clone();
            minus[(a, b)] -= h;
            let fp = fixed_point_sigma_step(x, mu, &plus, beta);
            let fm = fixed_point_sigma_step(x, mu, &minus, beta);
            trace += (fp[(a, b)] - fm[(a, b)]) / (2.0 * h);
        }
    }
    trace
}

/// Zero-centred `MPE(0, I_p, beta)` data for the lab; stream `0` of the
/// seeded generator.
pub fn lab_data(n: usize, p: usize, beta: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sampler::sample_mpe(n, &DVector::zeros(p), &DMatrix::identity(p, p), beta, &mut rng)
        .expect("identity scale is valid")
}

/// One trajectory pair per shape value.
pub fn run_lab(betas: &[f64], p: usize, n: usize, iterations: usize, seed: u64) -> Vec<(TrajectoryRecord, TrajectoryRecord)> {
    betas
        .iter()
        .map(|&beta| {
            let x = lab_data(n, p, beta, seed);
            compare_trajectories(&x, &DVector::zeros(p), beta, iterations)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_map_is_one_step() {
        let x = lab_data(200, 2, 1.0, 1);
        let mu = DVector::zeros(2);
        let s1 = fixed_point_sigma_step(&x, &mu, &DMatrix::identity(2, 2), 1.0);
        let cov = x.transpose() * &x / 200.0;
        assert!((&s1 - &cov).norm() < 1e-12);
        let s2 = fixed_point_sigma_step(&x, &mu, &s1, 1.0);
        assert!((s2 - s1).norm() < 1e-12);
    }

    #[test]
    fn scalar_map_by_hand() {
        // p = 1, points 1 and 3, mu = 0, sigma = 2, beta = 1.5
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let got = fixed_point_sigma_step(&x, &DVector::zeros(1), &DMatrix::from_element(1, 1, 2.0), 1.5)[(0, 0)];
        let want = 1.5 / 2.0 * ((0.5f64).sqrt() * 1.0 + (4.5f64).sqrt() * 9.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_is_reproduced() {
        let x = lab_data(500, 2, 1.4, 2);
        let mu = DVector::zeros(2);
        let s = solve_fixed_point(&x, &mu, 1.4, 10_000).unwrap();
        assert!((fixed_point_sigma_step(&x, &mu, &s, 1.4) - &s).norm() < 1e-8);
    }

    #[test]
    fn jacobian_trace_matches_formula() {
        for (beta, p) in [(0.5, 2usize), (1.0, 1), (1.5, 3), (3.0, 2)] {
            let x = lab_data(800, p, beta, 3);
            let mu = DVector::zeros(p);
            let s = solve_fixed_point(&x, &mu, beta, 10_000).unwrap();
            let t = jacobian_trace_at_fixed_point(&x, &mu, &s, beta);
            let want = p as f64 * (1.0 - beta);
            assert!((t - want).abs() < 0.02 * want.abs().max(1.0), "beta {beta} p {p}: {t}");
        }
    }

    #[test]
    fn divergence_detection() {
        assert!(detect_divergence(&[1.0, f64::NAN]));
        assert!(detect_divergence(&[0.0, -1.0, -3.0, -6.0, -10.0, -15.0]));
        assert!(!detect_divergence(&[0.0, -1.0, -2.0, -3.0, -4.0, -5.0]));
        assert!(!detect_divergence(&[0.0, 1.0, 1.5, 1.7]));
    }

    #[test]
    fn low_beta_fixed_point_is_monotone() {
        for beta in [0.4, 0.8, 1.0] {
            let x = lab_data(300, 2, beta, 4);
            let (fp, gem) = compare_trajectories(&x, &DVector::zeros(2), beta, 60);
            for w in fp.loglik.windows(2) {
                assert!(w[1] >= w[0] - 1e-6);
            }
            for w in gem.loglik.windows(2) {
                assert!(w[1] >= w[0] - 1e-8);
            }
        }
    }

    #[test]
    fn beta_one_methods_agree() {
        let x = lab_data(300, 2, 1.0, 5);
        let (fp, gem) = compare_trajectories(&x, &DVector::zeros(2), 1.0, 20);
        assert!((fp.loglik.last().unwrap() - gem.loglik.last().unwrap()).abs() < 1e-6);
    }
}
