//! Dense linear-algebra helpers shared by the pattern engine and SLS.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::{Error, Result};

/// Singular values below `RANK_RTOL * sigma_max` are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Singular value decomposition (sorted, with `U` and `V^T`) whose
/// reconstruction error is checked.
///
/// nalgebra's default convergence threshold occasionally stops early on
/// matrices with clustered singular values, leaving an `O(1e-4)` backward
/// error, so a much tighter threshold is tried first.
pub fn svd(a: &DMatrix<f64>) -> SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let backward_error = |s: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>| {
        let (u, vt) = (s.u.as_ref().unwrap(), s.v_t.as_ref().unwrap());
        (u * DMatrix::from_diagonal(&s.singular_values) * vt - a).amax() / scale
    };
    let mut fallback = None;
    for eps in [1e-20, 1e-18, f64::EPSILON] {
        if let Some(s) = a.clone().try_svd(true, true, eps, 100_000) {
            if backward_error(&s) < 1e-12 {
                return s;
            }
            fallback.get_or_insert(s);
        }
    }
    fallback.unwrap_or_else(|| a.clone().svd(true, true))
}

/// SVD of an `m x n` matrix with the complete right basis `V` (n x n).
///
/// nalgebra only returns the thin factorization; the missing right singular
/// vectors of a wide matrix are completed with an orthonormal basis of the
/// complement obtained by QR. (Padding with zero rows instead loses accuracy.)
pub struct FullSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn full_svd(a: &DMatrix<f64>) -> FullSvd {
    let n = a.ncols();
    let svd = svd(a);
    let u = svd.u.expect("u requested");
    let thin_v = svd.v_t.expect("v_t requested").transpose();
    let k = thin_v.ncols();
    let v = if k < n {
        let mut aug = DMatrix::zeros(n, k + n);
        aug.columns_mut(0, k).copy_from(&thin_v);
        aug.columns_mut(k, n).fill_with_identity();
        let q = aug.qr().q();
        let mut v = DMatrix::zeros(n, n);
        v.columns_mut(0, k).copy_from(&thin_v);
        v.columns_mut(k, n - k).copy_from(&q.columns(k, n - k));
        v
    } else {
        thin_v
    };
    FullSvd {
        u,
        singular_values: svd.singular_values,
        v,
    }
}

pub fn numerical_rank(singular_values: &DVector<f64>, rtol: f64) -> usize {
    let smax = singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rtol * smax).count()
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    numerical_rank(&svd(a).singular_values, RANK_RTOL)
}

/// 2-norm condition number; infinite for rank-deficient square matrices.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = svd(a).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Solves a square system with partial-pivoting LU, refusing systems whose
/// condition number exceeds `max_condition`.
pub fn solve_checked(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    max_condition: f64,
) -> std::result::Result<DVector<f64>, f64> {
    let cond = condition_number(a);
    if !cond.is_finite() || cond > max_condition {
        return Err(cond);
    }
    a.clone().lu().solve(b).ok_or(cond)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = svd(a);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = (RANK_RTOL * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).expect("u and v_t were computed")
}

/// Result of [`lexicographic_lsq`].
#[derive(Debug, Clone)]
pub struct LexSolution {
    pub z: DVector<f64>,
    /// `||C z - d||_inf` at the returned point.
    pub constraint_residual: f64,
}

/// Two-stage least squares: minimise `||C z - d||` first, then `||F z - g||`
/// over the set of first-stage minimisers (min-norm where still free).
///
/// With consistent constraints this is the equality-constrained least-squares
/// problem `min ||F z - g|| s.t. C z = d`, solved by the null-space method.
pub fn lexicographic_lsq(
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    f: &DMatrix<f64>,
    g: &DVector<f64>,
) -> LexSolution {
    let n = c.ncols().max(f.ncols());
    if c.nrows() == 0 {
        let z = lstsq(f, g);
        return LexSolution {
            z,
            constraint_residual: 0.0,
        };
    }
    let svd = full_svd(c);
    let r = numerical_rank(&svd.singular_values, RANK_RTOL);

    // z0 = V_r S_r^{-1} U_r^T d
    let mut z0 = DVector::zeros(n);
    for k in 0..r {
        let coef = svd.u.column(k).dot(d) / svd.singular_values[k];
        z0.axpy(coef, &svd.v.column(k), 1.0);
    }

    let z = if r < n {
        let null = svd.v.columns(r, n - r).into_owned();
        let fz0 = f * &z0;
        let y = lstsq(&(f * &null), &(g - fz0));
        z0 + null * y
    } else {
        z0
    };
    let constraint_residual = (c * &z - d).amax();
    LexSolution {
        z,
        constraint_residual,
    }
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument("weight matrix must be square".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-12 * scale {
            return Err(Error::InvalidArgument(
                "weight matrix is not positive semi-definite".into(),
            ));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
