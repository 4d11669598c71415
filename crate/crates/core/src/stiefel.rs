//! Line search on the orthogonal group `{X in R^{p x p} : X'X = I}`.
//!
//! Objectives implement [`StiefelObjective`] (value plus Euclidean
//! gradient); the Riemannian gradient is the tangent projection of the
//! Euclidean one, and steps are retracted back with a QR factorization.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, pow_nonneg};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 30,
        }
    }
}

/// A smooth function of an orthonormal matrix, to be minimized.
pub trait StiefelObjective {
    fn value(&self, x: &DMatrix<f64>) -> f64;
    fn euclidean_gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

/// `P_X(Z) = Z - X (X'Z + Z'X) / 2`.
pub fn project_to_tangent(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let xtz = x.transpose() * z;
    z - x * ((&xtz + xtz.transpose()) * 0.5)
}

pub fn riemannian_gradient<O: StiefelObjective + ?Sized>(obj: &O, x: &DMatrix<f64>) -> DMatrix<f64> {
    project_to_tangent(x, &obj.euclidean_gradient(x))
}

/// QR retraction `R_X(V) = qf(X + V)` with the triangular factor's diagonal
/// made positive. Returns `None` if `X + V` stays rank deficient after
/// shrinking `V` a few times.
pub fn qr_retract(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if v.iter().all(|e| *e == 0.0) {
        return Some(x.clone());
    }
    let mut scale = 1.0;
    for _ in 0..8 {
        let y = x + v * scale;
        let qr = y.qr();
        let r = qr.r();
        let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
        if diag_min.is_finite() && diag_min > 1e-12 * r.amax().max(1.0) {
            let mut q = qr.q();
            for j in 0..q.ncols() {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            return Some(q);
        }
        scale *= 0.5;
    }
    None
}

/// Outcome of one Armijo line search.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub point: DMatrix<f64>,
    pub accepted: bool,
    pub step: f64,
    pub value: f64,
}

/// One Armijo backtracking step along `-grad`.
///
/// The first trial step is `initial_step / max(1, |grad|)` so that the
/// first trial moves by at most `initial_step` in Frobenius norm.
pub fn armijo_step<O: StiefelObjective + ?Sized>(
    obj: &O,
    x: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    cfg: &LineSearchConfig,
) -> StepResult {
    let f0 = obj.value(x);
    let g2 = grad.norm_squared();
    if g2 == 0.0 || !g2.is_finite() || !f0.is_finite() {
        return StepResult {
            point: x.clone(),
            accepted: g2 == 0.0,
            step: 0.0,
            value: f0,
        };
    }
    let mut t = cfg.initial_step / g2.sqrt().max(1.0);
    for _ in 0..=cfg.max_backtracks {
        if let Some(y) = qr_retract(x, &(grad * -t)) {
            let fy = obj.value(&y);
            if fy.is_finite() && fy <= f0 - cfg.sufficient_decrease * t * g2 {
                return StepResult {
                    point: y,
                    accepted: true,
                    step: t,
                    value: fy,
                };
            }
        }
        t *= cfg.backtrack_factor;
    }
    StepResult {
        point: x.clone(),
        accepted: false,
        step: 0.0,
        value: f0,
    }
}

/// Convenience: compute the Riemannian gradient and take one Armijo step.
pub fn descend<O: StiefelObjective + ?Sized>(obj: &O, x: &DMatrix<f64>, cfg: &LineSearchConfig) -> StepResult {
    let grad = riemannian_gradient(obj, x);
    armijo_step(obj, x, &grad, cfg)
}

/// `tr{(Q X A^{-1} X')^beta}` for symmetric PSD `Q` and positive diagonal `A`.
#[derive(Debug, Clone)]
pub struct TracePowerTerm {
    pub q: DMatrix<f64>,
    pub a_inv: DVector<f64>,
    pub beta: f64,
}

impl TracePowerTerm {
    /// `E = Q^{1/2} X A^{-1} X' Q^{1/2}` shares its spectrum with `Q X A^{-1} X'`.
    fn inner(&self, x: &DMatrix<f64>, q_half: &DMatrix<f64>) -> DMatrix<f64> {
        let b = x * DMatrix::from_diagonal(&self.a_inv) * x.transpose();
        linalg::symmetrize(&(q_half * b * q_half))
    }

    pub fn value(&self, x: &DMatrix<f64>) -> f64 {
        let q_half = linalg::sym_power(&self.q, 0.5);
        let (vals, _) = linalg::sorted_symmetric_eigen(&self.inner(x, &q_half));
        vals.iter().map(|v| pow_nonneg(v.max(0.0), self.beta)).sum()
    }

    /// `2 beta (Q X A^{-1} X')^{beta-1} Q X A^{-1}`, evaluated as
    /// `2 beta Q^{1/2} E^{beta-1} Q^{1/2} X A^{-1}`.
    pub fn euclidean_gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let q_half = linalg::sym_power(&self.q, 0.5);
        let e_pow = linalg::sym_power(&self.inner(x, &q_half), self.beta - 1.0);
        (&q_half * e_pow * &q_half * x * DMatrix::from_diagonal(&self.a_inv)) * (2.0 * self.beta)
    }
}

/// Sum of dense trace-power terms sharing one orientation.
#[derive(Debug, Clone, Default)]
pub struct TracePowerObjective {
    pub terms: Vec<TracePowerTerm>,
}

impl StiefelObjective for TracePowerObjective {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    fn euclidean_gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let p = x.nrows();
        self.terms
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, t| acc + t.euclidean_gradient(x))
    }
}

/// One group of weighted observations for [`DistancePowerObjective`].
#[derive(Debug, Clone)]
pub struct DistanceGroup<'a> {
    /// `N x p` residuals `x_i - mu_g`.
    pub residuals: &'a DMatrix<f64>,
    pub weights: &'a [f64],
    pub a_inv: DVector<f64>,
    pub beta: f64,
}

/// `sum_g sum_i w_ig (r_ig' X A_g^{-1} X' r_ig)^{beta_g}`: a sum of rank-one
/// trace-power terms, one per observation.
#[derive(Debug, Clone, Default)]
pub struct DistancePowerObjective<'a> {
    pub groups: Vec<DistanceGroup<'a>>,
}

impl DistanceGroup<'_> {
    fn distances(&self, rotated: &DMatrix<f64>) -> DVector<f64> {
        rotated_distances(rotated, &self.a_inv)
    }
}

fn rotated_distances(v: &DMatrix<f64>, a_inv: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.nrows());
    for j in 0..v.ncols() {
        for i in 0..v.nrows() {
            out[i] += v[(i, j)] * v[(i, j)] * a_inv[j];
        }
    }
    out
}

impl StiefelObjective for DistancePowerObjective<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for g in &self.groups {
            let d = g.distances(&(g.residuals * x));
            for (w, di) in g.weights.iter().zip(d.iter()) {
                if *w > 0.0 {
                    total += w * pow_nonneg(*di, g.beta);
                }
            }
        }
        total
    }

    fn euclidean_gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let p = x.nrows();
        let mut grad = DMatrix::zeros(p, p);
        for g in &self.groups {
            let v = g.residuals * x;
            let d = g.distances(&v);
            let mut scaled = v;
            for i in 0..scaled.nrows() {
                let w = g.weights[i];
                let c = if w > 0.0 && d[i] > 0.0 {
                    2.0 * w * g.beta * pow_nonneg(d[i], g.beta - 1.0)
                } else {
                    0.0
                };
                scaled.row_mut(i).scale_mut(c);
            }
            for j in 0..p {
                scaled.column_mut(j).scale_mut(g.a_inv[j]);
            }
            grad += g.residuals.transpose() * scaled;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_orthonormal(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        random_matrix(rng, p, p).qr().q()
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let m = random_matrix(rng, p, p);
        &m * m.transpose() + DMatrix::identity(p, p) * 0.1
    }

    fn tangent_defect(x: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
        let m = x.transpose() * g;
        (&m + m.transpose()).norm()
    }

    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let p = a.nrows();
        let mut term = DMatrix::<f64>::identity(p, p);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn projection_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [2, 3, 5] {
            let x = random_orthonormal(&mut rng, p);
            assert!(project_to_tangent(&x, &x).norm() < 1e-12);
            let z = random_matrix(&mut rng, p, p);
            let g = project_to_tangent(&x, &z);
            assert!(tangent_defect(&x, &g) < 1e-10);
            assert!((project_to_tangent(&x, &g) - &g).norm() < 1e-10);
        }
    }

    #[test]
    fn retraction_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_orthonormal(&mut rng, 3);
        assert_eq!(qr_retract(&x, &DMatrix::zeros(3, 3)).unwrap(), x);
        let v = project_to_tangent(&x, &random_matrix(&mut rng, 3, 3));
        let y = qr_retract(&x, &v).unwrap();
        assert!(linalg::orthonormality_defect(&y) < 1e-12);
    }

    #[test]
    fn retraction_is_second_order_close_to_geodesic() {
        let theta: f64 = 0.4;
        let (s, c) = theta.sin_cos();
        let x = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let omega = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let mut prev = None;
        for k in 1..5 {
            let t = 0.1 / f64::powi(2.0, k);
            let v = &x * &omega * t;
            let geo = &x * expm(&(&omega * t));
            let err = (qr_retract(&x, &v).unwrap() - geo).norm();
            let first = (qr_retract(&x, &v).unwrap() - (&x + &v)).norm();
            assert!(err < 10.0 * t * t && first < 10.0 * t * t);
            if let Some(pe) = prev {
                // quadratic decay: halving t cuts the error by about 4
                let ratio: f64 = pe / first;
                assert!(ratio > 3.0 && ratio < 5.0, "{ratio}");
            }
            prev = Some(first);
        }
    }

    #[test]
    fn zero_gradient_is_accepted_without_moving() {
        let x = DMatrix::<f64>::identity(3, 3);
        let obj = TracePowerObjective {
            terms: vec![TracePowerTerm {
                q: DMatrix::identity(3, 3) * 2.0,
                a_inv: DVector::from_element(3, 1.0),
                beta: 1.0,
            }],
        };
        let g = riemannian_gradient(&obj, &x);
        assert!(g.norm() < 1e-12);
        let res = armijo_step(&obj, &x, &DMatrix::zeros(3, 3), &LineSearchConfig::default());
        assert!(res.accepted);
        assert_eq!(res.point, x);
    }

    fn directional_check<O: StiefelObjective>(obj: &O, x: &DMatrix<f64>, rng: &mut ChaCha8Rng, tol: f64) {
        let p = x.nrows();
        let grad = riemannian_gradient(obj, x);
        for _ in 0..20 {
            let dir = project_to_tangent(x, &random_matrix(rng, p, p));
            let h = 1e-6;
            let plus = qr_retract(x, &(&dir * h)).unwrap();
            let minus = qr_retract(x, &(&dir * -h)).unwrap();
            let fd = (obj.value(&plus) - obj.value(&minus)) / (2.0 * h);
            let an = grad.dot(&dir);
            assert!(
                (fd - an).abs() <= tol * an.abs().max(fd.abs()).max(1e-3),
                "fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn trace_power_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [2, 3, 4] {
            for beta in [0.4, 1.0, 1.7, 3.0] {
                let x = random_orthonormal(&mut rng, p);
                let terms = (0..2)
                    .map(|_| TracePowerTerm {
                        q: random_spd(&mut rng, p),
                        a_inv: DVector::from_fn(p, |_, _| rng.random_range(0.3..3.0)),
                        beta,
                    })
                    .collect();
                directional_check(&TracePowerObjective { terms }, &x, &mut rng, 1e-4);
            }
        }
    }

    #[test]
    fn beta_one_gradient_is_projected_linear_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_orthonormal(&mut rng, 3);
        let q = random_spd(&mut rng, 3);
        let a_inv = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        let term = TracePowerTerm {
            q: q.clone(),
            a_inv: a_inv.clone(),
            beta: 1.0,
        };
        let want = project_to_tangent(&x, &(&q * &x * DMatrix::from_diagonal(&a_inv) * 2.0));
        let got = riemannian_gradient(&TracePowerObjective { terms: vec![term] }, &x);
        assert!((want - got).norm() < 1e-10);
    }

    #[test]
    fn distance_objective_matches_rank_one_trace_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 3;
        let x = random_orthonormal(&mut rng, p);
        let residuals = random_matrix(&mut rng, 6, p);
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let a_inv = DVector::from_vec(vec![0.7, 1.3, 2.1]);
        let beta = 1.6;
        let dist = DistancePowerObjective {
            groups: vec![DistanceGroup {
                residuals: &residuals,
                weights: &weights,
                a_inv: a_inv.clone(),
                beta,
            }],
        };
        let dense = TracePowerObjective {
            terms: (0..6)
                .map(|i| {
                    let r = residuals.row(i).transpose();
                    TracePowerTerm {
                        q: &r * r.transpose() * weights[i].powf(1.0 / beta),
                        a_inv: a_inv.clone(),
                        beta,
                    }
                })
                .collect(),
        };
        assert!((dist.value(&x) - dense.value(&x)).abs() < 1e-9 * dist.value(&x));
        let g1 = riemannian_gradient(&dist, &x);
        let g2 = riemannian_gradient(&dense, &x);
        assert!((g1 - g2).norm() < 1e-7);
        directional_check(&dist, &x, &mut rng, 1e-4);
    }

    #[test]
    fn quadratic_objective_descends_to_stationarity() {
        // tr(C X A X') is minimized by pairing large eigenvalues of C with small entries of A
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_spd(&mut rng, 3);
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let obj = TracePowerObjective {
            terms: vec![TracePowerTerm {
                q: c.clone(),
                a_inv: a.clone(),
                beta: 1.0,
            }],
        };
        let (vals, _) = linalg::sorted_symmetric_eigen(&c);
        let optimum: f64 = (0..3).map(|i| vals[i] * a[i]).sum();
        let mut x = random_orthonormal(&mut rng, 3);
        let mut f = obj.value(&x);
        let cfg = LineSearchConfig::default();
        for _ in 0..5000 {
            let grad = riemannian_gradient(&obj, &x);
            if grad.norm() < 1e-8 {
                break;
            }
            let res = armijo_step(&obj, &x, &grad, &cfg);
            assert!(res.value <= f);
            if !res.accepted {
                break;
            }
            x = res.point;
            f = res.value;
        }
        assert!(riemannian_gradient(&obj, &x).norm() < 1e-6);
        assert!((f - optimum).abs() < 1e-6, "{f} vs {optimum}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn accepted_steps_satisfy_sufficient_decrease(seed in any::<u64>(), p in 2usize..5, beta in 0.3f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_orthonormal(&mut rng, p);
            let obj = TracePowerObjective {
                terms: vec![TracePowerTerm {
                    q: random_spd(&mut rng, p),
                    a_inv: DVector::from_fn(p, |_, _| rng.random_range(0.2..5.0)),
                    beta,
                }],
            };
            let cfg = LineSearchConfig::default();
            let grad = riemannian_gradient(&obj, &x);
            prop_assert!(tangent_defect(&x, &grad) < 1e-10 * grad.norm().max(1.0));
            let f0 = obj.value(&x);
            let res = armijo_step(&obj, &x, &grad, &cfg);
            prop_assert!(res.value <= f0);
            if res.accepted && res.step > 0.0 {
                prop_assert!(res.value <= f0 - cfg.sufficient_decrease * res.step * grad.norm_squared() + 1e-12 * f0.abs());
                prop_assert!(linalg::orthonormality_defect(&res.point) < 1e-12);
            }
        }
    }
}
