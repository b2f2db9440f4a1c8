//! Small dense symmetric-matrix helpers shared across the crate.
//!
//! Everything here is sized for the problem at hand (p up to a few dozen),
//! so the factorizations are plain unblocked loops over `DMatrix`.

use nalgebra::{DMatrix, DVector};

/// Unblocked Cholesky with an explicit pivot floor.
///
/// Returns the lower factor L with `m = L Lᵀ`, or `None` as soon as a pivot
/// (the diagonal value before the square root) drops to `pivot_floor` or
/// below. `pivot_floor = 0.0` reproduces the plain positive-definiteness
/// test; callers that need a relative tolerance compute the floor themselves.
pub fn cholesky_lower(m: &DMatrix<f64>, pivot_floor: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_floor) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Some(l)
}

/// `log det(m)` from a lower Cholesky factor.
pub fn logdet_from_lower(l: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..l.nrows() {
        acc += l[(j, j)].ln();
    }
    2.0 * acc
}

/// `log det(m)` for a symmetric positive-definite matrix, `None` otherwise.
pub fn logdet_spd(m: &DMatrix<f64>) -> Option<f64> {
    cholesky_lower(m, 0.0).map(|l| logdet_from_lower(&l))
}

/// Solve `L Lᵀ x = rhs` in place given the lower factor.
pub fn solve_with_lower(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = rhs.clone();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l[(i, k)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|ch| ch.inverse())
}

/// Force exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut m = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        m = m.max((x - y).abs());
    }
    m
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky_lower(&m, 0.0).unwrap();
        let back = &l * l.transpose();
        assert!(max_abs_diff(&m, &back) < 1e-12);
        let ld = logdet_from_lower(&l);
        assert_relative_eq!(ld.exp(), m.determinant(), max_relative = 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_lower(&m, 0.0).is_none());
    }

    #[test]
    fn pivot_floor_is_respected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(cholesky_lower(&m, 0.0).is_some());
        assert!(cholesky_lower(&m, 1e-12).is_none());
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky_lower(&m, 0.0).unwrap();
        let rhs = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let x = solve_with_lower(&l, &rhs);
        let resid = &m * &x - &rhs;
        assert!(resid.amax() < 1e-12);
    }
}
