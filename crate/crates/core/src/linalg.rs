//! Small dense-matrix helpers shared by the solver stages.

use nalgebra::{DMatrix, Dyn};

use crate::error::{Result, SolverError};
use crate::tol;

/// Max absolute entry; 0 for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

/// Max absolute entry of (M - M^T).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// (M + M^T) / 2 in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn is_exactly_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// Reciprocal condition number sigma_min / sigma_max from the SVD.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax == 0.0 {
        0.0
    } else {
        smin / smax
    }
}

/// LU solve of A X = B with an rcond gate; `node`/`t` feed the error report.
pub fn solve_resolvent(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    node: usize,
    t: f64,
) -> Result<DMatrix<f64>> {
    let rc = rcond(a);
    if !rc.is_finite() || rc < tol::RESOLVENT_RCOND_MIN {
        return Err(SolverError::SingularResolvent { node, t, rcond: rc });
    }
    let lu: nalgebra::LU<f64, Dyn, Dyn> = a.clone().lu();
    lu.solve(b)
        .ok_or(SolverError::SingularResolvent { node, t, rcond: rc })
}

/// Quadratic form x^T M x.
pub fn quad_form(m: &DMatrix<f64>, x: &nalgebra::DVector<f64>) -> f64 {
    quad_form_offset(m, x, 0)
}

/// Quadratic form over a window: y^T M y with y = x[off .. off + M.nrows()].
/// Written as plain loops so per-step cost accumulation allocates nothing.
pub fn quad_form_offset(m: &DMatrix<f64>, x: &nalgebra::DVector<f64>, off: usize) -> f64 {
    let n = m.nrows();
    debug_assert_eq!(m.ncols(), n);
    debug_assert!(off + n <= x.len());
    let mut acc = 0.0;
    for j in 0..n {
        let xj = x[off + j];
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[off + i];
        }
        acc += col * xj;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn symmetrize_and_asymmetry() {
        let mut m = dmatrix![1.0, 2.0; 4.0, 3.0];
        assert_eq!(asymmetry(&m), 2.0);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(asymmetry(&m), 0.0);
    }

    #[test]
    fn min_eig_of_diag() {
        let m = dmatrix![2.0, 0.0; 0.0, -1.5];
        assert!((min_eig_sym(&m) + 1.5).abs() < 1e-14);
    }

    #[test]
    fn rcond_identity_is_one() {
        let m = DMatrix::<f64>::identity(3, 3);
        assert!((rcond(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quad_form_windows_agree_with_dense_product() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        let x = nalgebra::dvector![3.0, -1.0, 2.0, 0.5];
        let head = nalgebra::dvector![3.0, -1.0];
        let tail = nalgebra::dvector![2.0, 0.5];
        assert_eq!(quad_form(&m, &head), quad_form_offset(&m, &x, 0));
        assert_eq!(quad_form(&m, &tail), quad_form_offset(&m, &x, 2));
        assert!((quad_form(&m, &head) - (&head.transpose() * &m * &head)[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn resolvent_rejects_singular() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let b = DMatrix::<f64>::identity(2, 2);
        assert!(matches!(
            solve_resolvent(&m, &b, 3, 0.5),
            Err(SolverError::SingularResolvent { node: 3, .. })
        ));
    }
}
