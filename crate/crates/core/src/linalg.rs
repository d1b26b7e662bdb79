//! Small dense linear-algebra helpers on top of nalgebra's SVD.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold used for least-norm solves.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Number of singular values above `rel_tol * sigma_max`; zero for the zero matrix.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Spectral norm.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

/// Moore-Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pseudo_inverse(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (nr, nc) = a.shape();
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut pinv = DMatrix::zeros(nc, nr);
    if smax == 0.0 {
        return pinv;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * smax {
            // pinv += v_k u_k^T / s
            let vk = vt.row(k).transpose();
            let uk = u.column(k);
            pinv += (vk * uk.transpose()) / s;
        }
    }
    pinv
}

/// Least-norm solution of `a h = v` together with the residual `|a h - v|`.
pub fn least_norm_solve(a: &DMatrix<f64>, v: &DVector<f64>) -> (DVector<f64>, f64) {
    let h = pseudo_inverse(a, PINV_REL_TOL) * v;
    let residual = (a * &h - v).norm();
    (h, residual)
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let nc = a.ncols();
    // Pad to square so that the SVD returns a full right basis.
    let rows = a.nrows().max(nc);
    let mut padded = DMatrix::zeros(rows, nc);
    padded.view_mut((0, 0), a.shape()).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let kept: Vec<usize> = (0..nc)
        .filter(|&k| smax == 0.0 || svd.singular_values[k] <= rel_tol * smax)
        .collect();
    let mut basis = DMatrix::zeros(nc, kept.len());
    for (j, &k) in kept.iter().enumerate() {
        basis.set_column(j, &vt.row(k).transpose());
    }
    basis
}

/// Orthonormal basis of the orthogonal complement of the column space of `a`.
pub fn column_complement(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    null_space(&a.transpose(), rel_tol)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
