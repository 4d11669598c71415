//! Scale-matrix updates (CM step 2) for the eight structures.
//!
//! Every update maximizes, or at least increases, the scale part of the
//! expected complete-data log-likelihood
//! `sum_g [-(n_g/2) log|Sigma_g| - (1/2) sum_i tau_ig delta_ig^beta_g]`
//! with the means and shape parameters held fixed.
//!
//! Two minorizers are used. For `beta <= 1`, `t -> t^beta` is concave and the
//! tangent line at the current distance gives a Gaussian-like surrogate with
//! observation weights `c_i = tau_i beta delta_i^{beta-1}`; its maximizer is a
//! weighted scatter matrix. For `beta > 1`, convexity of `t -> t^beta`
//! (Jensen over the eigen-coordinates) gives a separable surrogate in the
//! eigenvalues `a_h` with maximizer
//! `a_h = [(beta/n) sum_i tau_i delta_i^{beta-1} a_h^{beta-1} v_ih^2]^{1/beta}`,
//! where `v_i = D' r_i`. The orientation `D` is then moved by one Armijo step
//! on the exact objective `sum_i tau_i delta_i^beta`, which cannot increase it.

use nalgebra::{DMatrix, DVector};

use crate::error::FitError;
use crate::linalg::{self, log_sum_exp, pow_nonneg};
use crate::model::{ComponentScale, Responsibilities, ScaleDecomposition, ScaleStructure};
use crate::stiefel::{self, DistanceGroup, DistancePowerObjective, LineSearchConfig};

/// Residuals and weights for one M-step, one entry per component.
#[derive(Debug, Clone)]
pub struct ScatterCache {
    /// `N x p` residuals `x_i - mu_g` per component.
    pub residuals: Vec<DMatrix<f64>>,
    /// Column `g` of the responsibilities.
    pub weights: Vec<Vec<f64>>,
    /// `n_g = sum_i tau_ig`.
    pub counts: Vec<f64>,
}

impl ScatterCache {
    pub fn new(x: &DMatrix<f64>, tau: &Responsibilities, means: &[DVector<f64>]) -> Self {
        let residuals: Vec<_> = means.iter().map(|m| linalg::centered(x, m)).collect();
        let weights: Vec<Vec<f64>> = (0..tau.groups())
            .map(|g| tau.tau.column(g).iter().copied().collect())
            .collect();
        let counts = weights.iter().map(|w| w.iter().sum()).collect();
        Self {
            residuals,
            weights,
            counts,
        }
    }

    pub fn groups(&self) -> usize {
        self.residuals.len()
    }

    pub fn dim(&self) -> usize {
        self.residuals[0].ncols()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Tuning for a scale update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleOptions {
    pub line_search: LineSearchConfig,
    /// Eigenvalues below `eigen_floor * max eigenvalue` are raised to it.
    pub eigen_floor: f64,
}

impl Default for ScaleOptions {
    fn default() -> Self {
        Self {
            line_search: LineSearchConfig::default(),
            eigen_floor: 1e-10,
        }
    }
}

/// Eigenvalues and orientation of one component before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScale {
    pub eigenvalues: DVector<f64>,
    pub orientation: DMatrix<f64>,
}

impl RawScale {
    fn axis_aligned(eigenvalues: DVector<f64>) -> Self {
        let p = eigenvalues.len();
        Self {
            eigenvalues,
            orientation: DMatrix::identity(p, p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaleUpdate {
    pub scale: ScaleDecomposition,
    /// Whether any eigenvalue had to be raised to the floor.
    pub floored: bool,
}

/// Rotated residuals `V = R D` and distances `delta_i = sum_h V_ih^2 / a_h`.
fn rotated(residuals: &DMatrix<f64>, eigenvalues: &DVector<f64>, orientation: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let v = residuals * orientation;
    let d = linalg::rotated_mahalanobis(&v, eigenvalues);
    (v, d)
}

/// Tangent-line weights `tau_i beta delta_i^{beta-1}`; zero where either
/// factor vanishes (the residual is then zero or carries no weight).
fn hyperplane_weights(tau: &[f64], delta: &DVector<f64>, beta: f64) -> Vec<f64> {
    tau.iter()
        .zip(delta.iter())
        .map(|(&t, &d)| {
            if t > 0.0 && d > 0.0 {
                t * beta * pow_nonneg(d, beta - 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// `sum_i c_i v_ih^2` for every column `h`.
fn weighted_column_squares(v: &DMatrix<f64>, c: &[f64]) -> DVector<f64> {
    DVector::from_fn(v.ncols(), |h, _| {
        v.column(h).iter().zip(c).map(|(x, w)| w * x * x).sum()
    })
}

/// One pooled group for [`power_eigenvalues`].
struct PowerTerm<'a> {
    v: &'a DMatrix<f64>,
    tau: &'a [f64],
    delta: &'a DVector<f64>,
    beta: f64,
}

/// Convex-regime eigenvalue update pooled over groups sharing `a`:
/// `a_h = a_h^{(b-1)/b} [(1/total) sum_g beta_g sum_i tau delta^{beta_g-1} v_ih^2]^{1/b}`
/// with `b = beta_star >= max beta_g`. Evaluated in log space.
fn power_eigenvalues(terms: &[PowerTerm<'_>], a_old: &DVector<f64>, beta_star: f64, total: f64) -> DVector<f64> {
    let p = a_old.len();
    DVector::from_fn(p, |h, _| {
        let logs = terms.iter().flat_map(|t| {
            (0..t.v.nrows()).filter_map(move |i| {
                let (w, d, x) = (t.tau[i], t.delta[i], t.v[(i, h)]);
                if w > 0.0 && d > 0.0 && x != 0.0 {
                    Some(t.beta.ln() + w.ln() + (t.beta - 1.0) * d.ln() + 2.0 * x.abs().ln())
                } else {
                    None
                }
            })
        });
        let lse = log_sum_exp(logs);
        ((beta_star - 1.0) / beta_star * a_old[h].ln() + (lse - total.ln()) / beta_star).exp()
    })
}

fn stiefel_step(groups: Vec<DistanceGroup<'_>>, d: &DMatrix<f64>, opts: &ScaleOptions) -> DMatrix<f64> {
    let obj = DistancePowerObjective { groups };
    stiefel::descend(&obj, d, &opts.line_search).point
}

fn inverse(a: &DVector<f64>) -> DVector<f64> {
    a.map(|v| 1.0 / v)
}

/// Guard for the eigenvalue updates: a non-positive value (every
/// weighted residual zero along an axis) is replaced by zero and left to
/// the floor.
fn sanitize(a: DVector<f64>) -> DVector<f64> {
    a.map(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
}

/// VVV: unconstrained scale for component `g`.
pub fn update_vvv(cache: &ScatterCache, current: &ComponentScale, beta: f64, g: usize, opts: &ScaleOptions) -> RawScale {
    let (r, tau, n) = (&cache.residuals[g], &cache.weights[g][..], cache.counts[g]);
    let a_old = current.eigenvalues();
    let (v, delta) = rotated(r, &a_old, &current.orientation);
    if beta <= 1.0 {
        let c = hyperplane_weights(tau, &delta, beta);
        let sigma = linalg::weighted_scatter(r, &c) / n;
        let (vals, vecs) = linalg::sorted_symmetric_eigen(&sigma);
        return RawScale {
            eigenvalues: sanitize(vals),
            orientation: vecs,
        };
    }
    let a = sanitize(power_eigenvalues(
        &[PowerTerm {
            v: &v,
            tau,
            delta: &delta,
            beta,
        }],
        &a_old,
        beta,
        n,
    ));
    if a.iter().any(|x| *x <= 0.0) {
        return RawScale {
            eigenvalues: a,
            orientation: current.orientation.clone(),
        };
    }
    let d = stiefel_step(
        vec![DistanceGroup {
            residuals: r,
            weights: tau,
            a_inv: inverse(&a),
            beta,
        }],
        &current.orientation,
        opts,
    );
    RawScale {
        eigenvalues: a,
        orientation: d,
    }
}

/// VVI: axis-aligned scale for component `g`.
pub fn update_vvi(cache: &ScatterCache, current: &ComponentScale, beta: f64, g: usize) -> RawScale {
    let (r, tau, n) = (&cache.residuals[g], &cache.weights[g][..], cache.counts[g]);
    let a_old = current.eigenvalues();
    let delta = linalg::rotated_mahalanobis(r, &a_old);
    let a = if beta <= 1.0 {
        weighted_column_squares(r, &hyperplane_weights(tau, &delta, beta)) / n
    } else {
        power_eigenvalues(
            &[PowerTerm {
                v: r,
                tau,
                delta: &delta,
                beta,
            }],
            &a_old,
            beta,
            n,
        )
    };
    RawScale::axis_aligned(sanitize(a))
}

/// `log sum_i tau_i (r_i' r_i)^beta` (or `-inf` if every term vanishes).
fn log_power_sum(r: &DMatrix<f64>, tau: &[f64], beta: f64) -> f64 {
    log_sum_exp((0..r.nrows()).filter_map(|i| {
        let s = r.row(i).norm_squared();
        (tau[i] > 0.0 && s > 0.0).then(|| tau[i].ln() + beta * s.ln())
    }))
}

/// VII: `lambda_g = ((beta/(p n_g)) sum_i tau_i (r_i'r_i)^beta)^{1/beta}`, the
/// exact maximizer.
pub fn update_vii(cache: &ScatterCache, beta: f64, g: usize) -> f64 {
    let p = cache.dim() as f64;
    let lse = log_power_sum(&cache.residuals[g], &cache.weights[g], beta);
    (((beta / (p * cache.counts[g])).ln() + lse) / beta).exp()
}

/// EII: the common `lambda` solving `pN = sum_g beta_g lambda^{-beta_g} S_g`
/// with `S_g = sum_i tau_ig (r_ig'r_ig)^{beta_g}`, by bisection on `log lambda`.
pub fn update_eii(cache: &ScatterCache, betas: &[f64]) -> f64 {
    let p = cache.dim() as f64;
    let target = (p * cache.total()).ln();
    // (log beta_g + log S_g, beta_g) for groups with any spread
    let terms: Vec<(f64, f64)> = (0..cache.groups())
        .filter_map(|g| {
            let ls = log_power_sum(&cache.residuals[g], &cache.weights[g], betas[g]);
            ls.is_finite().then(|| (betas[g].ln() + ls, betas[g]))
        })
        .collect();
    if terms.is_empty() {
        return 0.0;
    }
    let residual = |u: f64| log_sum_exp(terms.iter().map(|(c, b)| c - b * u)) - target;
    let k = (terms.len() as f64).ln();
    let mut lo = terms.iter().map(|(c, b)| (c - target) / b).fold(f64::INFINITY, f64::min);
    let mut hi = terms
        .iter()
        .map(|(c, b)| (c - target + k) / b)
        .fold(f64::NEG_INFINITY, f64::max);
    if residual(lo) < 0.0 || residual(hi) > 0.0 {
        // rounding at the bracket ends; widen slightly
        lo -= 1.0;
        hi += 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// VVE: per-component eigenvalues in the shared frame, then one step on the
/// shared orientation.
pub fn update_vve(cache: &ScatterCache, current: &ScaleDecomposition, betas: &[f64], opts: &ScaleOptions) -> Vec<RawScale> {
    let d0 = &current.components[0].orientation;
    let mut eigen = Vec::with_capacity(cache.groups());
    for g in 0..cache.groups() {
        let a_old = current.components[g].eigenvalues();
        let (v, delta) = rotated(&cache.residuals[g], &a_old, d0);
        let tau = &cache.weights[g][..];
        let a = if betas[g] <= 1.0 {
            weighted_column_squares(&v, &hyperplane_weights(tau, &delta, betas[g])) / cache.counts[g]
        } else {
            power_eigenvalues(
                &[PowerTerm {
                    v: &v,
                    tau,
                    delta: &delta,
                    beta: betas[g],
                }],
                &a_old,
                betas[g],
                cache.counts[g],
            )
        };
        eigen.push(sanitize(a));
    }
    let d = if eigen.iter().all(|a| a.iter().all(|x| *x > 0.0)) {
        let groups = (0..cache.groups())
            .map(|g| DistanceGroup {
                residuals: &cache.residuals[g],
                weights: &cache.weights[g],
                a_inv: inverse(&eigen[g]),
                beta: betas[g],
            })
            .collect();
        stiefel_step(groups, d0, opts)
    } else {
        d0.clone()
    };
    eigen
        .into_iter()
        .map(|a| RawScale {
            eigenvalues: a,
            orientation: d.clone(),
        })
        .collect()
}

/// Shared eigenvalues for EEE/EEI/EEV given each component's frame.
fn pooled_eigenvalues(cache: &ScatterCache, a_old: &DVector<f64>, frames: &[&DMatrix<f64>], betas: &[f64]) -> DVector<f64> {
    let g_count = cache.groups();
    let rotated_all: Vec<(DMatrix<f64>, DVector<f64>)> = (0..g_count)
        .map(|g| rotated(&cache.residuals[g], a_old, frames[g]))
        .collect();
    let total = cache.total();
    let a = if betas.iter().all(|&b| b <= 1.0) {
        let mut acc = DVector::zeros(a_old.len());
        for (g, (v, delta)) in rotated_all.iter().enumerate() {
            acc += weighted_column_squares(v, &hyperplane_weights(&cache.weights[g], delta, betas[g]));
        }
        acc / total
    } else {
        let beta_star = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let terms: Vec<PowerTerm<'_>> = rotated_all
            .iter()
            .enumerate()
            .map(|(g, (v, delta))| PowerTerm {
                v,
                tau: &cache.weights[g],
                delta,
                beta: betas[g],
            })
            .collect();
        power_eigenvalues(&terms, a_old, beta_star, total)
    };
    sanitize(a)
}

/// EEE: one scale shared by every component.
pub fn update_eee(cache: &ScatterCache, current: &ScaleDecomposition, betas: &[f64], opts: &ScaleOptions) -> RawScale {
    let shared = &current.components[0];
    let d0 = &shared.orientation;
    if betas.iter().all(|&b| b <= 1.0) {
        let p = cache.dim();
        let a_old = shared.eigenvalues();
        let mut sigma = DMatrix::zeros(p, p);
        for g in 0..cache.groups() {
            let (_, delta) = rotated(&cache.residuals[g], &a_old, d0);
            let c = hyperplane_weights(&cache.weights[g], &delta, betas[g]);
            sigma += linalg::weighted_scatter(&cache.residuals[g], &c);
        }
        let (vals, vecs) = linalg::sorted_symmetric_eigen(&(sigma / cache.total()));
        return RawScale {
            eigenvalues: sanitize(vals),
            orientation: vecs,
        };
    }
    let frames = vec![d0; cache.groups()];
    let a = pooled_eigenvalues(cache, &shared.eigenvalues(), &frames, betas);
    if a.iter().any(|x| *x <= 0.0) {
        return RawScale {
            eigenvalues: a,
            orientation: d0.clone(),
        };
    }
    let a_inv = inverse(&a);
    let groups = (0..cache.groups())
        .map(|g| DistanceGroup {
            residuals: &cache.residuals[g],
            weights: &cache.weights[g],
            a_inv: a_inv.clone(),
            beta: betas[g],
        })
        .collect();
    RawScale {
        eigenvalues: a,
        orientation: stiefel_step(groups, d0, opts),
    }
}

/// EEI: one axis-aligned scale shared by every component.
pub fn update_eei(cache: &ScatterCache, current: &ScaleDecomposition, betas: &[f64]) -> RawScale {
    let p = cache.dim();
    let eye = DMatrix::identity(p, p);
    let frames = vec![&eye; cache.groups()];
    RawScale::axis_aligned(pooled_eigenvalues(cache, &current.components[0].eigenvalues(), &frames, betas))
}

/// EEV: shared eigenvalues, one orientation per component.
pub fn update_eev(cache: &ScatterCache, current: &ScaleDecomposition, betas: &[f64], opts: &ScaleOptions) -> Vec<RawScale> {
    let frames: Vec<&DMatrix<f64>> = current.components.iter().map(|c| &c.orientation).collect();
    let a = pooled_eigenvalues(cache, &current.components[0].eigenvalues(), &frames, betas);
    let ok = a.iter().all(|x| *x > 0.0);
    let a_inv = inverse(&a);
    (0..cache.groups())
        .map(|g| {
            let d = if ok {
                stiefel_step(
                    vec![DistanceGroup {
                        residuals: &cache.residuals[g],
                        weights: &cache.weights[g],
                        a_inv: a_inv.clone(),
                        beta: betas[g],
                    }],
                    frames[g],
                    opts,
                )
            } else {
                frames[g].clone()
            };
            RawScale {
                eigenvalues: a.clone(),
                orientation: d,
            }
        })
        .collect()
}

/// Apply the relative eigenvalue floor and normalize into a decomposition.
pub fn finalize(structure: ScaleStructure, raw: Vec<RawScale>, eigen_floor: f64) -> Result<ScaleUpdate, FitError> {
    let max = raw
        .iter()
        .flat_map(|r| r.eigenvalues.iter().copied())
        .fold(0.0f64, f64::max);
    if !(max.is_finite() && max > 0.0) || raw.iter().any(|r| r.orientation.iter().any(|v| !v.is_finite())) {
        return Err(FitError::SingularScale { iteration: 0 });
    }
    let floor = eigen_floor * max;
    let mut floored = false;
    let components = raw
        .into_iter()
        .map(|r| {
            let vals = r.eigenvalues.map(|v| {
                if v < floor {
                    floored = true;
                    floor
                } else {
                    v
                }
            });
            match structure.shape_sharing() {
                crate::model::Sharing::Identity => {
                    // spherical: all eigenvalues are lambda
                    ComponentScale::spherical(vals[0], vals.len())
                }
                _ => ComponentScale::from_eigen(&vals, r.orientation),
            }
        })
        .collect();
    Ok(ScaleUpdate {
        scale: ScaleDecomposition::new(structure, components),
        floored,
    })
}

/// One scale update for every component according to `current.structure`.
pub fn update_scale(
    cache: &ScatterCache,
    current: &ScaleDecomposition,
    betas: &[f64],
    opts: &ScaleOptions,
) -> Result<ScaleUpdate, FitError> {
    let structure = current.structure;
    let g_count = cache.groups();
    let p = cache.dim();
    let raw = match structure {
        ScaleStructure::VVV => (0..g_count)
            .map(|g| update_vvv(cache, &current.components[g], betas[g], g, opts))
            .collect(),
        ScaleStructure::VVI => (0..g_count)
            .map(|g| update_vvi(cache, &current.components[g], betas[g], g))
            .collect(),
        ScaleStructure::VII => (0..g_count)
            .map(|g| RawScale::axis_aligned(DVector::from_element(p, update_vii(cache, betas[g], g))))
            .collect(),
        ScaleStructure::EII => {
            let lambda = update_eii(cache, betas);
            vec![RawScale::axis_aligned(DVector::from_element(p, lambda)); g_count]
        }
        ScaleStructure::VVE => update_vve(cache, current, betas, opts),
        ScaleStructure::EEE => vec![update_eee(cache, current, betas, opts); g_count],
        ScaleStructure::EEI => vec![update_eei(cache, current, betas); g_count],
        ScaleStructure::EEV => update_eev(cache, current, betas, opts),
    };
    finalize(structure, raw, opts.eigen_floor)
}

/// Gaussian (`beta = 1`) estimate of the scale from responsibilities, used
/// to start the GEM iterations.
pub fn initial_scale(cache: &ScatterCache, structure: ScaleStructure, eigen_floor: f64) -> Result<ScaleUpdate, FitError> {
    let (g_count, p) = (cache.groups(), cache.dim());
    let covs: Vec<DMatrix<f64>> = (0..g_count)
        .map(|g| linalg::weighted_scatter(&cache.residuals[g], &cache.weights[g]) / cache.counts[g])
        .collect();
    let total = cache.total();
    let pooled = covs
        .iter()
        .zip(&cache.counts)
        .fold(DMatrix::zeros(p, p), |acc, (c, n)| acc + c * *n)
        / total;
    let diag = |m: &DMatrix<f64>| RawScale::axis_aligned(m.diagonal());
    let spherical = |v: f64| RawScale::axis_aligned(DVector::from_element(p, v));
    let eig = |m: &DMatrix<f64>| {
        let (vals, vecs) = linalg::sorted_symmetric_eigen(m);
        RawScale {
            eigenvalues: sanitize(vals),
            orientation: vecs,
        }
    };
    let raw: Vec<RawScale> = match structure {
        ScaleStructure::VVV => covs.iter().map(eig).collect(),
        ScaleStructure::VVI => covs.iter().map(diag).collect(),
        ScaleStructure::VII => covs.iter().map(|c| spherical(c.trace() / p as f64)).collect(),
        ScaleStructure::EII => vec![spherical(pooled.trace() / p as f64); g_count],
        ScaleStructure::EEI => vec![diag(&pooled); g_count],
        ScaleStructure::EEE => vec![eig(&pooled); g_count],
        ScaleStructure::VVE => {
            let shared = eig(&pooled).orientation;
            covs.iter()
                .map(|c| RawScale {
                    eigenvalues: sanitize((shared.transpose() * c * &shared).diagonal()),
                    orientation: shared.clone(),
                })
                .collect()
        }
        ScaleStructure::EEV => {
            let per: Vec<RawScale> = covs.iter().map(eig).collect();
            let a = per
                .iter()
                .zip(&cache.counts)
                .fold(DVector::zeros(p), |acc, (r, n)| acc + &r.eigenvalues * *n)
                / total;
            per.into_iter()
                .map(|r| RawScale {
                    eigenvalues: a.clone(),
                    orientation: r.orientation,
                })
                .collect()
        }
    };
    finalize(structure, raw, eigen_floor)
}

/// Scale part of the expected complete-data log-likelihood.
pub fn scale_objective(cache: &ScatterCache, scale: &ScaleDecomposition, betas: &[f64]) -> f64 {
    (0..cache.groups())
        .map(|g| {
            let c = scale.component(g);
            let (_, delta) = rotated(&cache.residuals[g], &c.eigenvalues(), &c.orientation);
            let spread: f64 = cache.weights[g]
                .iter()
                .zip(delta.iter())
                .map(|(t, d)| t * pow_nonneg(*d, betas[g]))
                .sum();
            -0.5 * cache.counts[g] * c.log_det() - 0.5 * spread
        })
        .sum()
}

/// Current `N x G` squared Mahalanobis distances from a cache.
pub fn cached_distances(cache: &ScatterCache, scale: &ScaleDecomposition) -> Vec<DVector<f64>> {
    (0..cache.groups())
        .map(|g| {
            let c = scale.component(g);
            rotated(&cache.residuals[g], &c.eigenvalues(), &c.orientation).1
        })
        .collect()
}
