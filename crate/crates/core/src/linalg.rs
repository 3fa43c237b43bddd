use nalgebra::{DMatrix, DVector};

/// Extreme eigenvalues `(λ_min, λ_max)` of a symmetric matrix.
pub(crate) fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// `vᵀ M v`.
pub(crate) fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Least-squares solution `A† b` with singular values below
/// `rel_tol · σ_max` treated as zero.
pub(crate) fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DVector::zeros(a.ncols());
    }
    svd.solve(b, rel_tol * smax)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}
