//! Minimal dense routines for small symmetric matrices stored row-major.

use crate::scalar::Scalar;

/// Lower Cholesky factor of an SPD `d x d` matrix, or `None` when a pivot is
/// not strictly positive.
pub fn cholesky<T: Scalar>(a: &[T], d: usize) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s = s - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: &[T], d: usize, b: &mut [T]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// `ln det(L Lᵀ)`.
pub fn chol_logdet<T: Scalar>(l: &[T], d: usize) -> T {
    (0..d).map(|i| l[i * d + i].ln()).sum::<T>() * T::of(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs_matrix() {
        let a = [4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let mut b = [1.0, 2.0, 3.0];
        forward_substitute(&l, 3, &mut b);
        // L y = (1, 2, 3)
        let y0 = 1.0 / l[0];
        assert!((b[0] - y0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!((chol_logdet(&cholesky(&[4.0f64, 0.0, 0.0, 9.0], 2).unwrap(), 2) - 36f64.ln()).abs() < 1e-12);
    }
}
