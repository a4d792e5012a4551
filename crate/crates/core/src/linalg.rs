//! Small dense linear-algebra helpers shared by the kernel solvers.
//!
//! Every pseudoinverse in the crate truncates eigen/singular values below
//! `max(rows, cols) * eps * sigma_max`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Truncation threshold for pseudoinverses of a `rows x cols` matrix whose
/// largest singular value is `sigma_max`.
pub fn pinv_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Symmetric eigendecomposition of `a`, symmetrized first.
pub fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Applies `f` to the eigenvalues of the symmetric matrix `a`.
pub fn sym_spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = sym_eigen(a);
    let mapped = eig.eigenvalues.map(f);
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&mapped);
    scaled * eig.eigenvectors.transpose()
}

/// Principal square root of a PSD matrix. Negative eigenvalues (roundoff) are
/// clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_spectral_map(a, |v| v.max(0.0).sqrt())
}

/// Moore-Penrose pseudoinverse of a symmetric matrix.
pub fn sym_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen(a);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = pinv_tolerance(a.nrows(), a.ncols(), max_abs);
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > tol { 1.0 / v } else { 0.0 });
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv);
    scaled * eig.eigenvectors.transpose()
}

/// `pinv(a) * b` for symmetric `a`, without forming the pseudoinverse.
pub fn sym_pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = sym_eigen(a);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = pinv_tolerance(a.nrows(), a.ncols(), max_abs);
    let mut proj = eig.eigenvectors.tr_mul(b);
    for (p, v) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
        *p = if v.abs() > tol { *p / v } else { 0.0 };
    }
    &eig.eigenvectors * proj
}

/// Thin factor `U` and spectrum of `x * x^T` computed through the small
/// `cols x cols` Gram `x^T x`. Returns `(u, s2)` with `x x^T = u diag(s2) u^T`,
/// keeping only directions above the pseudoinverse tolerance.
pub fn thin_left_factor(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let gram = x.tr_mul(x);
    let eig = sym_eigen(&gram);
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
    // eigenvalues of x^T x are squared singular values
    let tol_sv = pinv_tolerance(x.nrows(), x.ncols(), max_ev.max(0.0).sqrt());
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&j| eig.eigenvalues[j] > 0.0 && eig.eigenvalues[j].sqrt() > tol_sv)
        .collect();
    let mut u = DMatrix::zeros(x.nrows(), keep.len());
    let mut s2 = DVector::zeros(keep.len());
    for (c, &j) in keep.iter().enumerate() {
        let lam = eig.eigenvalues[j];
        let v = eig.eigenvectors.column(j);
        let col = x * v / lam.sqrt();
        u.set_column(c, &col);
        s2[c] = lam;
    }
    (u, s2)
}
