//! Generalized EM for ePEM mixtures.
//!
//! One outer iteration runs the E-step, then the conditional updates in the
//! order mixing weights, shape parameters, locations, scales. Each
//! conditional update increases the expected complete-data log-likelihood,
//! so the observed log-likelihood never decreases.

use nalgebra::{DMatrix, DVector};

use crate::density::{self, log_normalizing_constant};
use crate::error::{FitError, ModelError};
use crate::linalg::{self, log_sum_exp, pow_nonneg};
use crate::model::{BetaConstraint, ComponentScale, Dataset, MixtureParams, ModelSpec, Responsibilities, BETA_CAP};
use crate::scale::{self, ScaleOptions, ScatterCache};
use crate::selection;
use crate::special::{digamma, trigamma};
use crate::stiefel::LineSearchConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub max_iter: usize,
    pub aitken_epsilon: f64,
    pub beta_cap: f64,
    /// Guarded Newton passes for each location per outer iteration.
    pub mu_newton_steps: usize,
    pub mu_max_halvings: usize,
    pub beta_bracket: (f64, f64),
    pub beta_tolerance: f64,
    pub eigen_floor: f64,
    pub line_search: LineSearchConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            aitken_epsilon: 0.005,
            beta_cap: BETA_CAP,
            mu_newton_steps: 1,
            mu_max_halvings: 10,
            beta_bracket: (0.05, BETA_CAP),
            beta_tolerance: 1e-8,
            eigen_floor: 1e-10,
            line_search: LineSearchConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (lo, hi) = self.beta_bracket;
        if !(self.aitken_epsilon > 0.0) {
            return Err(ModelError::InvalidParameter("aitken epsilon must be positive".into()));
        }
        if !(lo > 0.0 && lo < hi && hi <= self.beta_cap && self.beta_cap <= BETA_CAP) {
            return Err(ModelError::InvalidParameter(format!(
                "invalid shape bracket ({lo}, {hi}) for cap {}",
                self.beta_cap
            )));
        }
        if self.max_iter == 0 {
            return Err(ModelError::InvalidParameter("max_iter must be positive".into()));
        }
        Ok(())
    }

    fn scale_options(&self) -> ScaleOptions {
        ScaleOptions {
            line_search: self.line_search,
            eigen_floor: self.eigen_floor,
        }
    }

    /// Largest admissible shape value (the cap itself is excluded).
    fn beta_upper(&self) -> f64 {
        self.beta_bracket.1.min(self.beta_cap) * (1.0 - 1e-9)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: MixtureParams,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub free_params: usize,
    pub bic: f64,
    pub icl: f64,
    pub map_labels: Vec<usize>,
    pub responsibilities: Responsibilities,
    /// Shape updates that ended on a bracket endpoint.
    pub beta_boundary_hits: usize,
}

/// Posterior membership probabilities via log-sum-exp.
pub fn e_step(data: &Dataset, params: &MixtureParams) -> Result<Responsibilities, FitError> {
    let mut lw = density::weighted_log_densities(&data.x, params);
    for i in 0..lw.nrows() {
        let norm = log_sum_exp(lw.row(i).iter().copied());
        if !norm.is_finite() {
            return Err(FitError::AllComponentsUnderflow { row: i });
        }
        for v in lw.row_mut(i).iter_mut() {
            *v = (*v - norm).exp();
        }
        let s = lw.row(i).sum();
        lw.row_mut(i).scale_mut(1.0 / s);
    }
    Ok(Responsibilities { tau: lw })
}

/// `pi_g = n_g / N`.
pub fn update_pi(tau: &Responsibilities) -> Vec<f64> {
    let n = tau.n() as f64;
    tau.counts().into_iter().map(|c| c / n).collect()
}

fn check_counts(counts: &[f64], dim: usize, iteration: usize) -> Result<(), FitError> {
    let threshold = dim.max(2) as f64;
    for (g, &c) in counts.iter().enumerate() {
        if !(c >= threshold) {
            return Err(FitError::DegenerateComponent {
                component: g,
                iteration,
                size: c,
            });
        }
    }
    Ok(())
}

/// `-(1/2) sum_i tau_i delta_i(mu)^beta`, the location-dependent part of Q.
fn location_objective(x: &DMatrix<f64>, tau: &[f64], mu: &DVector<f64>, scale: &ComponentScale, beta: f64) -> f64 {
    let delta = linalg::mahalanobis_rows(x, mu, &scale.eigenvalues(), &scale.orientation);
    -0.5 * tau.iter().zip(delta.iter()).map(|(t, d)| t * pow_nonneg(*d, beta)).sum::<f64>()
}

/// Guarded Newton update of one location. Falls back to the reweighted mean
/// with weights `tau delta^{beta-1}` when the Hessian is not negative
/// definite; a step is accepted only if it does not decrease the location
/// part of Q (with up to `max_halvings` halvings).
pub fn update_mu(
    x: &DMatrix<f64>,
    tau: &[f64],
    mu: &DVector<f64>,
    scale: &ComponentScale,
    beta: f64,
    cfg: &FitConfig,
) -> DVector<f64> {
    let mut current = mu.clone();
    for _ in 0..cfg.mu_newton_steps.max(1) {
        current = mu_pass(x, tau, &current, scale, beta, cfg.mu_max_halvings);
    }
    current
}

fn mu_pass(
    x: &DMatrix<f64>,
    tau: &[f64],
    mu: &DVector<f64>,
    scale: &ComponentScale,
    beta: f64,
    max_halvings: usize,
) -> DVector<f64> {
    let p = mu.len();
    let sigma_inv = scale.sigma_inverse();
    let r = linalg::centered(x, mu);
    let delta = linalg::mahalanobis_rows(x, mu, &scale.eigenvalues(), &scale.orientation);
    let mut weighted_sum = DVector::zeros(p);
    let mut w1_total = 0.0;
    let mut w2 = Vec::with_capacity(tau.len());
    let mut w1 = Vec::with_capacity(tau.len());
    for i in 0..tau.len() {
        let (t, d) = (tau[i], delta[i]);
        if t > 0.0 && d >= 1e-12 {
            let a = t * pow_nonneg(d, beta - 1.0);
            w1.push(a);
            w2.push(t * pow_nonneg(d, beta - 2.0));
            weighted_sum += r.row(i).transpose() * a;
            w1_total += a;
        } else {
            w1.push(0.0);
            w2.push(0.0);
        }
    }
    let grad = &sigma_inv * &weighted_sum * beta;
    let q0 = location_objective(x, tau, mu, scale, beta);
    let accept = |step: &DVector<f64>| -> Option<DVector<f64>> {
        let mut t = 1.0;
        for _ in 0..=max_halvings {
            let cand = mu + step * t;
            if cand.iter().all(|v| v.is_finite()) && location_objective(x, tau, &cand, scale, beta) >= q0 {
                return Some(cand);
            }
            t *= 0.5;
        }
        None
    };
    if grad.iter().all(|v| *v == 0.0) {
        return mu.clone();
    }
    // -H = beta [ (sum w1) S^-1 + 2 (beta - 1) S^-1 (sum w2 r r') S^-1 ]
    let outer = linalg::weighted_scatter(&r, &w2);
    let neg_h = (&sigma_inv * w1_total + &sigma_inv * outer * &sigma_inv * (2.0 * (beta - 1.0))) * beta;
    if let Some(chol) = linalg::symmetrize(&neg_h).cholesky() {
        let step = chol.solve(&grad);
        if let Some(next) = accept(&step) {
            return next;
        }
    }
    if w1_total > 0.0 {
        let target = mu + &weighted_sum / w1_total;
        if let Some(next) = accept(&(target - mu)) {
            return next;
        }
    }
    mu.clone()
}

/// Result of a shape-parameter solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSolve {
    pub beta: f64,
    /// The score did not change sign in the bracket; `beta` is the endpoint
    /// nearest the maximizer.
    pub at_boundary: bool,
}

/// Weighted distances entering a shape-parameter equation.
#[derive(Debug, Clone, Copy)]
pub struct BetaTerm<'a> {
    pub tau: &'a [f64],
    pub delta: &'a DVector<f64>,
}

/// Score `d/d beta [ n log k(p, beta) - (1/2) sum tau delta^beta ]` and its
/// derivative. Strictly decreasing in `beta`.
pub fn beta_score(terms: &[BetaTerm<'_>], n: f64, p: usize, beta: f64) -> (f64, f64) {
    let pf = p as f64;
    let x = pf / (2.0 * beta);
    let psi = digamma(1.0 + x) + std::f64::consts::LN_2;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for t in terms {
        for (w, d) in t.tau.iter().zip(t.delta.iter()) {
            if *w > 0.0 && *d > 0.0 {
                let ld = d.ln();
                let db = pow_nonneg(*d, beta);
                s1 += w * db * ld;
                s2 += w * db * ld * ld;
            }
        }
    }
    let score = pf * n / (2.0 * beta * beta) * psi - 0.5 * s1;
    let deriv = -pf * n / beta.powi(3) * psi - pf * pf * n / (4.0 * beta.powi(4)) * trigamma(1.0 + x) - 0.5 * s2;
    (score, deriv)
}

/// Maximize the shape-dependent part of Q by safeguarded Newton with a
/// bisection fallback on the bracket.
pub fn solve_beta(terms: &[BetaTerm<'_>], n: f64, p: usize, current: f64, cfg: &FitConfig) -> BetaSolve {
    let mut lo = cfg.beta_bracket.0;
    let mut hi = cfg.beta_upper();
    let score = |b: f64| beta_score(terms, n, p, b);
    let s_lo = score(lo).0;
    if !(s_lo > 0.0) {
        return BetaSolve {
            beta: lo,
            at_boundary: true,
        };
    }
    let s_hi = score(hi).0;
    if s_hi >= 0.0 {
        return BetaSolve {
            beta: hi,
            at_boundary: true,
        };
    }
    let mut b = if current > lo && current < hi { current } else { 0.5 * (lo + hi) };
    for _ in 0..200 {
        let (s, ds) = score(b);
        if s.abs() < cfg.beta_tolerance {
            break;
        }
        if s > 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        if hi - lo <= 4.0 * f64::EPSILON * b {
            break;
        }
        let newton = b - s / ds;
        b = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    BetaSolve {
        beta: b,
        at_boundary: false,
    }
}

pub fn update_beta_variable(tau: &[f64], delta: &DVector<f64>, p: usize, current: f64, cfg: &FitConfig) -> BetaSolve {
    let n = tau.iter().sum();
    solve_beta(&[BetaTerm { tau, delta }], n, p, current, cfg)
}

pub fn update_beta_equal(taus: &[&[f64]], deltas: &[DVector<f64>], p: usize, current: f64, cfg: &FitConfig) -> BetaSolve {
    let terms: Vec<BetaTerm<'_>> = taus
        .iter()
        .zip(deltas)
        .map(|(tau, delta)| BetaTerm { tau, delta })
        .collect();
    let n = taus.iter().map(|t| t.iter().sum::<f64>()).sum();
    solve_beta(&terms, n, p, current, cfg)
}

/// Aitken stopping rule on the last three log-likelihood values.
///
/// When the previous increment is numerically zero the rule reduces to
/// checking that the latest increment is numerically zero as well.
pub fn aitken_converged(prev: f64, current: f64, next: f64, epsilon: f64) -> bool {
    let tiny = 1e-12 * current.abs().max(1.0);
    let denom = current - prev;
    if denom.abs() <= tiny {
        return (next - current).abs() <= tiny;
    }
    let a = (next - current) / denom;
    if a == 1.0 {
        return false;
    }
    let asymptote = current + (next - current) / (1.0 - a);
    let gap = asymptote - current;
    (0.0..epsilon).contains(&gap)
}

/// Expected complete-data log-likelihood `Q(theta)` at responsibilities `tau`.
pub fn expected_complete_loglik(data: &Dataset, tau: &Responsibilities, params: &MixtureParams) -> f64 {
    let cache = ScatterCache::new(&data.x, tau, &params.means);
    let p = params.dim();
    let counts = tau.counts();
    let mut q = scale::scale_objective(&cache, &params.scale, &params.betas);
    for g in 0..params.groups() {
        q += counts[g] * (params.weights[g].ln() + log_normalizing_constant(p, params.betas[g]));
    }
    q
}

fn weighted_means(x: &DMatrix<f64>, tau: &Responsibilities) -> Vec<DVector<f64>> {
    let counts = tau.counts();
    (0..tau.groups())
        .map(|g| (x.transpose() * tau.tau.column(g)) / counts[g])
        .collect()
}

/// Gaussian-style starting parameters from initial responsibilities
/// (`beta = 1` in every component).
pub fn initial_params(data: &Dataset, spec: ModelSpec, init: &Responsibilities, cfg: &FitConfig) -> Result<MixtureParams, FitError> {
    if init.groups() != spec.groups || init.n() != data.n() {
        return Err(ModelError::DimensionMismatch {
            expected: spec.groups,
            actual: init.groups(),
        }
        .into());
    }
    if data.dim() != spec.dim {
        return Err(ModelError::DimensionMismatch {
            expected: spec.dim,
            actual: data.dim(),
        }
        .into());
    }
    check_counts(&init.counts(), spec.dim, 0)?;
    let means = weighted_means(&data.x, init);
    let cache = ScatterCache::new(&data.x, init, &means);
    let scale = scale::initial_scale(&cache, spec.structure(), cfg.eigen_floor)?.scale;
    Ok(MixtureParams {
        spec,
        weights: update_pi(init),
        means,
        scale,
        betas: vec![1.0; spec.groups],
    })
}

pub fn fit(data: &Dataset, spec: ModelSpec, init: &Responsibilities, cfg: &FitConfig) -> Result<FitReport, FitError> {
    cfg.validate()?;
    let params = initial_params(data, spec, init, cfg)?;
    fit_from_params(data, params, cfg)
}

/// Run the GEM iterations from explicit starting parameters.
pub fn fit_from_params(data: &Dataset, start: MixtureParams, cfg: &FitConfig) -> Result<FitReport, FitError> {
    cfg.validate()?;
    let spec = start.spec;
    let (p, g_count) = (spec.dim, spec.groups);
    let at = |iteration: usize| {
        move |e: FitError| match e {
            FitError::SingularScale { .. } => FitError::SingularScale { iteration },
            FitError::NonFiniteLikelihood { .. } => FitError::NonFiniteLikelihood { iteration },
            other => other,
        }
    };
    let opts = cfg.scale_options();
    let mut params = start;
    let mut trace = vec![density::mixture_log_likelihood(data, &params).map_err(at(0))?];
    let mut converged = false;
    let mut iterations = 0;
    let mut floored_before = false;
    let mut boundary_hits = 0;

    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let tau = e_step(data, &params)?;
        let counts = tau.counts();
        check_counts(&counts, p, iter)?;
        let weights = update_pi(&tau);

        // shape parameters at the current locations and scales
        let cache = ScatterCache::new(&data.x, &tau, &params.means);
        let deltas = scale::cached_distances(&cache, &params.scale);
        let betas = match spec.beta_constraint() {
            BetaConstraint::Variable => (0..g_count)
                .map(|g| {
                    let s = update_beta_variable(&cache.weights[g], &deltas[g], p, params.betas[g], cfg);
                    boundary_hits += s.at_boundary as usize;
                    s.beta
                })
                .collect(),
            BetaConstraint::Equal => {
                let taus: Vec<&[f64]> = cache.weights.iter().map(|w| &w[..]).collect();
                let s = update_beta_equal(&taus, &deltas, p, params.betas[0], cfg);
                boundary_hits += s.at_boundary as usize;
                vec![s.beta; g_count]
            }
        };

        let means: Vec<DVector<f64>> = (0..g_count)
            .map(|g| update_mu(&data.x, &cache.weights[g], &params.means[g], params.scale.component(g), betas[g], cfg))
            .collect();

        let cache = ScatterCache::new(&data.x, &tau, &means);
        let update = scale::update_scale(&cache, &params.scale, &betas, &opts).map_err(at(iter))?;
        if update.floored && floored_before {
            return Err(FitError::SingularScale { iteration: iter });
        }
        floored_before = update.floored;

        params = MixtureParams {
            spec,
            weights,
            means,
            scale: update.scale,
            betas,
        };
        let ll = density::mixture_log_likelihood(data, &params).map_err(at(iter))?;
        trace.push(ll);
        let k = trace.len();
        if k >= 3 && aitken_converged(trace[k - 3], trace[k - 2], trace[k - 1], cfg.aitken_epsilon) {
            converged = true;
            break;
        }
    }

    params.scale.canonicalize();
    let tau = e_step(data, &params)?;
    let loglik = *trace.last().expect("trace is never empty");
    let free_params = spec.total_free_params();
    let bic = selection::bic(loglik, free_params, data.n());
    let icl = selection::icl(bic, &tau);
    Ok(FitReport {
        map_labels: tau.map_labels(),
        responsibilities: tau,
        params,
        loglik,
        loglik_trace: trace,
        converged,
        iterations,
        free_params,
        bic,
        icl,
        beta_boundary_hits: boundary_hits,
    })
}
