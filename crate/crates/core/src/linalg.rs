//! Small dense linear-algebra helpers shared by the solvers and estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_RTOL: f64 = 1e-11;

/// Full singular value decomposition that always returns a square `V`
/// (p x p), padding wide matrices with zero rows.
fn full_svd(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (m, p) = a.shape();
    let padded = if m < p {
        let mut padded = DMatrix::zeros(p, p);
        padded.view_mut((0, 0), (m, p)).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = SVD::new(padded, true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    (svd.singular_values, u, v)
}

fn rank_of(singular_values: &DVector<f64>, rtol: f64) -> usize {
    let max = singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rtol * max).count()
}

/// Orthonormal basis (p x k) for the null space of `a` (m x p).
pub fn null_space(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let p = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(p, p);
    }
    let (sv, _, v) = full_svd(a);
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let cols: Vec<usize> = (0..p)
        .filter(|&k| k >= sv.len() || max == 0.0 || sv[k] <= rtol * max)
        .collect();
    DMatrix::from_fn(p, cols.len(), |i, j| v[(i, cols[j])])
}

/// Orthonormal basis (m x k) for the column space of `a`.
pub fn range_basis(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let m = a.nrows();
    if a.ncols() == 0 || m == 0 {
        return DMatrix::zeros(m, 0);
    }
    let svd = SVD::new(a.clone(), true, false);
    let u = svd.u.expect("requested U");
    let sv = svd.singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let cols: Vec<usize> = (0..sv.len())
        .filter(|&k| max > 0.0 && sv[k] > rtol * max)
        .collect();
    DMatrix::from_fn(m, cols.len(), |i, j| u[(i, cols[j])])
}

/// Minimum-norm least-squares solution of `a x ~= b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let p = a.ncols();
    if a.nrows() == 0 || p == 0 {
        return DVector::zeros(p);
    }
    let svd = SVD::new(a.clone(), true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return DVector::zeros(p);
    }
    svd.solve(b, RANK_RTOL * max)
        .expect("both factors were computed")
}

/// Nonnegative least squares `min ||a x - b||, x >= 0` (Lawson-Hanson).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 || a.nrows() == 0 {
        return x;
    }
    let tol = 1e-12 * (1.0 + a.amax() * b.amax()) * n as f64;
    let mut passive = vec![false; n];
    let sub = |passive: &[bool]| -> (Vec<usize>, DVector<f64>) {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let ap = DMatrix::from_fn(a.nrows(), idx.len(), |i, k| a[(i, idx[k])]);
        let z = lstsq(&ap, b);
        let mut s = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            s[j] = z[k];
        }
        (idx, s)
    };
    for _ in 0..3 * n {
        let w = a.tr_mul(&(b - a * &x));
        let Some(j) = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &k| w[i].total_cmp(&w[k])) else {
            break;
        };
        passive[j] = true;
        loop {
            let (idx, s) = sub(&passive);
            if idx.iter().all(|&i| s[i] > 0.0) {
                x = s;
                break;
            }
            let alpha = idx
                .iter()
                .filter(|&&i| s[i] <= 0.0)
                .map(|&i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-15 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// Particular solution and null-space basis of the affine set `{x : e x = f}`.
///
/// Returns `None` when the system is inconsistent beyond `tol` (scaled by
/// `1 + |f|_inf`).
pub fn affine_parametrization(
    e: &DMatrix<f64>,
    f: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let p = e.ncols();
    if e.nrows() == 0 {
        return Some((DVector::zeros(p), DMatrix::identity(p, p)));
    }
    let x0 = lstsq(e, f);
    let resid = (e * &x0 - f).amax();
    if resid > tol * (1.0 + f.amax()) {
        return None;
    }
    Some((x0, null_space(e, RANK_RTOL)))
}

/// Numerical rank with the crate-wide relative cutoff.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let (sv, _, _) = full_svd(a);
    rank_of(&sv, RANK_RTOL)
}

/// Eigen-decomposition of the symmetrized matrix, eigenvalues ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let vectors = DMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}
