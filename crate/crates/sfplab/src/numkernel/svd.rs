//! Singular values via one-sided Jacobi rotations.
//!
//! The matrices diagnosed here are tiny (a sentence's hidden states), so a
//! simple quadratically convergent sweep is plenty; there is no
//! performance-critical path through this module.

use crate::error::{Error, Result};

use super::matrix::Matrix;

const MAX_SWEEPS: usize = 64;
const TOL: f64 = 1e-14;

/// Singular values of `x`, descending, length `min(rows, cols)`.
pub fn singular_values(x: &Matrix) -> Result<Vec<f64>> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Input("singular_values: empty matrix".into()));
    }
    if !x.is_finite() {
        return Err(Error::Input(
            "singular_values: non-finite entries".into(),
        ));
    }

    // One-sided Jacobi works on columns; orient so rows >= cols (singular
    // values are invariant under transpose).
    let a = if x.rows() >= x.cols() {
        x.clone()
    } else {
        x.transpose()
    };
    let m = a.rows();
    let n = a.cols();

    // Column-major copy so each column is contiguous for the rotations.
    let mut col = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            col[j * m + i] = a.get(i, j);
        }
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let ap = col[p * m + i];
                    let aq = col[q * m + i];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = col[p * m + i];
                    let aq = col[q * m + i];
                    col[p * m + i] = c * ap - s * aq;
                    col[q * m + i] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..n)
        .map(|j| {
            col[j * m..(j + 1) * m]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_singular_values() {
        let sv = singular_values(&Matrix::identity(3)).unwrap();
        for v in sv {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_matrix() {
        let x = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sv = singular_values(&x).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_matrix_has_unit_spectrum() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let sv = singular_values(&x).unwrap();
        assert!((sv[0] - 1.0).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_matrix_matches_its_transpose() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let a = singular_values(&x).unwrap();
        let b = singular_values(&x.transpose()).unwrap();
        assert_eq!(a.len(), 2);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_entries_rejected() {
        let x = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(singular_values(&x), Err(Error::Input(_))));
    }

    #[test]
    fn rank_deficient_has_zero_singular_value() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let sv = singular_values(&x).unwrap();
        assert!((sv[0] - 5.0f64.sqrt()).abs() < 1e-12);
        assert!(sv[1].abs() < 1e-12);
    }
}
