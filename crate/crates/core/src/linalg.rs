//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Average the matrix with its transpose.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Symmetric inverse square root `A^{-1/2}`.
///
/// Eigenvalues below `clamp_rel * max_eigenvalue` are raised to that floor
/// before inversion. Returns the transform and the raw (unclamped) spectrum.
pub fn inverse_sqrt_psd(a: &DMatrix<f64>, clamp_rel: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (values, vectors) = sorted_eigen(a);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Numerical(
            "inverse square root of a matrix without positive eigenvalues".into(),
        ));
    }
    let floor = clamp_rel * max;
    let scaled = DVector::from_iterator(
        values.len(),
        values.iter().map(|&v| 1.0 / v.max(floor).sqrt()),
    );
    let t = &vectors * DMatrix::from_diagonal(&scaled) * vectors.transpose();
    Ok((symmetrize(&t), values))
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| symmetrize(&c.inverse()))
}

/// Least-squares solution of `X b ≈ y` through a thin SVD.
///
/// Returns `None` when `X` is numerically rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if x.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return None;
    }
    svd.solve(y, tol).ok()
}

/// Numerical rank using the usual `max(dim) * eps * s_max` cut.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Right singular vector belonging to the smallest singular value.
pub fn null_direction(x: &DMatrix<f64>) -> DVector<f64> {
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    v_t.row(idx).transpose()
}

/// Lower Cholesky factor of a positive semidefinite matrix, tolerating
/// exact zeros on the diagonal (needed for degenerate weight laws).
pub fn psd_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d <= 1e-14 * a[(j, j)].abs().max(1e-300) {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / djj;
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let (t, _) = inverse_sqrt_psd(&a, 1e-12).unwrap();
        assert_relative_eq!(t[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(t[(1, 1)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(t[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (t, _) = inverse_sqrt_psd(&a, 1e-12).unwrap();
        let w = &t * &a * t.transpose();
        assert!((w - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn psd_cholesky_handles_zero_rows() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0]);
        let l = psd_cholesky(&a);
        assert!((&l * l.transpose() - a).amax() < 1e-12);
    }

    #[test]
    fn least_squares_detects_rank_deficiency() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(least_squares(&x, &y).is_none());
        assert_eq!(numerical_rank(&x), 1);
    }
}
