//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
///
/// The input is symmetrized first, so small asymmetries from accumulated
/// rounding do not leak into the eigenvectors.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `m^power` for a symmetric positive-semidefinite matrix; negative
/// eigenvalues from rounding are clamped to zero.
pub fn sym_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| {
        let v = v.max(0.0);
        if v == 0.0 {
            0.0
        } else {
            v.powf(power)
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Flip column signs so the first entry with magnitude above `1e-12` in
/// every column is positive.
pub fn canonicalize_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let pivot = m.column(j).iter().copied().find(|v| v.abs() > 1e-12);
        if let Some(v) = pivot {
            if v < 0.0 {
                m.column_mut(j).neg_mut();
            }
        }
    }
}

/// Frobenius norm of `a' a - I`.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols();
    (a.transpose() * a - DMatrix::<f64>::identity(n, n)).norm()
}

/// Numerically stable `log(sum(exp(xs)))`; returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `x^power` with the continuous convention `0^power = 0` for `power > 0`.
#[inline]
pub fn pow_nonneg(x: f64, power: f64) -> f64 {
    if x <= 0.0 {
        if power > 0.0 {
            0.0
        } else if power == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        (power * x.ln()).exp()
    }
}

/// Row-wise squared Mahalanobis distances `(x_i - mu)' Gamma diag(1/a) Gamma' (x_i - mu)`
/// for a decomposed scale.
pub fn mahalanobis_rows(
    x: &DMatrix<f64>,
    mean: &DVector<f64>,
    eigenvalues: &DVector<f64>,
    orientation: &DMatrix<f64>,
) -> DVector<f64> {
    let resid = centered(x, mean);
    rotated_mahalanobis(&(resid * orientation), eigenvalues)
}

/// Squared norms of rows of `v` weighted by `1/a`.
pub fn rotated_mahalanobis(v: &DMatrix<f64>, eigenvalues: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.nrows());
    for j in 0..v.ncols() {
        let inv = 1.0 / eigenvalues[j];
        for i in 0..v.nrows() {
            out[i] += v[(i, j)] * v[(i, j)] * inv;
        }
    }
    out
}

/// `x - 1 mu'` (rows are observations).
pub fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut r = x.clone();
    for j in 0..r.ncols() {
        let m = mean[j];
        r.column_mut(j).add_scalar_mut(-m);
    }
    r
}

/// `r' diag(w) r` for a residual matrix `r` (rows are observations).
pub fn weighted_scatter(r: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = r.ncols();
    let mut scaled = r.clone();
    for (i, &wi) in w.iter().enumerate() {
        scaled.row_mut(i).scale_mut(wi);
    }
    let mut s = r.transpose() * scaled;
    // exact symmetry for downstream eigensolvers
    for a in 0..p {
        for b in 0..a {
            let v = 0.5 * (s[(a, b)] + s[(b, a)]);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    s
}
