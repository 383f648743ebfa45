//! Small dense linear-algebra helpers shared across modules.
//!
//! Wraps nalgebra's Hermitian eigendecomposition and SVD with the
//! descending-order conventions the estimator and beamformer rely on.

use crate::{C64, CMat};

/// Hermitian eigendecomposition with eigenvalues sorted descending.
///
/// Returns `(values, vectors)` where `vectors.column(i)` pairs with
/// `values[i]`. The input must be Hermitian; only its lower triangle is
/// trusted by the underlying factorization.
pub fn hermitian_eigen_desc(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalue comparison")
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Full SVD with singular values sorted descending.
///
/// Returns `(u, sigma, v)` such that `m = u * diag(sigma) * v^H` with
/// `sigma[0] >= sigma[1] >= ...`.
pub fn svd_desc(m: &CMat) -> (CMat, Vec<f64>, CMat) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let n = svd.singular_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("singular value comparison")
    });
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = CMat::from_columns(
        &order
            .iter()
            .map(|&i| u.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    // v_t stores V^H row-wise; reorder rows then transpose back to V.
    let v = CMat::from_columns(
        &order
            .iter()
            .map(|&i| v_t.row(i).adjoint())
            .collect::<Vec<_>>(),
    );
    (u_sorted, sigma, v)
}

/// Squared Frobenius norm.
pub fn fro_norm_sq(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Conjugate-transpose product `a^H * b` as a convenience.
pub fn herm_prod(a: &CMat, b: &CMat) -> CMat {
    a.adjoint() * b
}

/// Identity matrix of size `n`.
pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Builds a complex matrix from a real one (imaginary parts zero).
pub fn from_real(m: &nalgebra::DMatrix<f64>) -> CMat {
    m.map(|x| C64::new(x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn hermitian_eigen_recovers_known_spectrum() {
        // Hand-built Hermitian matrix U diag(5, 2) U^H with a unitary U.
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let u = CMat::from_row_slice(
            2,
            2,
            &[
                c(inv_sqrt2, 0.0),
                c(0.0, -inv_sqrt2),
                c(0.0, inv_sqrt2),
                c(-inv_sqrt2, 0.0),
            ],
        );
        let d = CMat::from_diagonal(&crate::CVec::from_vec(vec![c(5.0, 0.0), c(2.0, 0.0)]));
        let m = &u * d * u.adjoint();

        let (vals, vecs) = hermitian_eigen_desc(&m);
        assert_relative_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-12);
        // Columns must be eigenvectors: M v = lambda v.
        for i in 0..2 {
            let v = vecs.column(i).into_owned();
            let mv = &m * &v;
            let lv = v.map(|z| z * vals[i]);
            assert!((mv - lv).norm() < 1e-12);
        }
    }

    #[test]
    fn svd_reconstructs_input_in_descending_order() {
        let m = CMat::from_row_slice(
            3,
            2,
            &[
                c(1.0, 0.5),
                c(-0.3, 0.2),
                c(0.0, -1.1),
                c(2.0, 0.0),
                c(0.7, 0.7),
                c(-0.4, 0.9),
            ],
        );
        let (u, sigma, v) = svd_desc(&m);
        assert!(sigma[0] >= sigma[1]);
        let d = CMat::from_fn(sigma.len(), sigma.len(), |i, j| {
            if i == j {
                c(sigma[i], 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let rebuilt = &u * d * v.adjoint();
        assert!((rebuilt - m).norm() < 1e-10);
    }

    #[test]
    fn fro_norm_matches_manual_sum() {
        let m = CMat::from_row_slice(1, 2, &[c(3.0, 4.0), c(0.0, 2.0)]);
        assert_relative_eq!(fro_norm_sq(&m), 25.0 + 4.0, epsilon = 1e-14);
    }
}
