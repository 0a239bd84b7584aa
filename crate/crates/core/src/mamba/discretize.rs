//! Zero-order-hold bilinear discretization of a continuous state matrix.
//!
//! This is a standalone reference utility; the model itself uses the
//! exponential per-channel parameterization.

use crate::tensor::{Result, Tensor, TensorError};

/// Discretizes `(A, B)` with step size `d` using the bilinear transform:
/// `A_bar = (I - d/2 A)^-1 (I + d/2 A)`, `B_bar = (I - d/2 A)^-1 d B`.
pub fn bilinear_discretize(a: &Tensor, b: &Tensor, d: f64) -> Result<(Tensor, Tensor)> {
    let n = square_dim(a)?;
    if b.shape().len() != 2 || b.shape()[0] != n {
        return Err(TensorError::ShapeMismatch {
            op: "bilinear_discretize",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let m = b.shape()[1];
    // I - d/2 A and I + d/2 A.
    let mut minus = vec![0.0; n * n];
    let mut plus = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = a.data()[i * n + j];
            let eye = if i == j { 1.0 } else { 0.0 };
            minus[i * n + j] = eye - 0.5 * d * aij;
            plus[i * n + j] = eye + 0.5 * d * aij;
        }
    }
    let inv = invert(&minus, n)?;
    let a_bar = mat_mul(&inv, &plus, n, n, n);
    let db: Vec<f64> = b.data().iter().map(|v| v * d).collect();
    let b_bar = mat_mul(&inv, &db, n, n, m);
    Ok((
        Tensor::new(vec![n, n], a_bar)?,
        Tensor::new(vec![n, m], b_bar)?,
    ))
}

fn square_dim(a: &Tensor) -> Result<usize> {
    if a.shape().len() == 2 && a.shape()[0] == a.shape()[1] {
        Ok(a.shape()[0])
    } else {
        Err(TensorError::Rank {
            op: "bilinear_discretize",
            expected: 2,
            shape: a.shape().to_vec(),
        })
    }
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut aug = vec![0.0; n * 2 * n];
    let w = 2 * n;
    for i in 0..n {
        for j in 0..n {
            aug[i * w + j] = a[i * n + j];
        }
        aug[i * w + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                aug[r1 * w + col]
                    .abs()
                    .total_cmp(&aug[r2 * w + col].abs())
            })
            .unwrap();
        if aug[pivot_row * w + col].abs() < 1e-300 {
            return Err(TensorError::Singular {
                op: "bilinear_discretize",
            });
        }
        if pivot_row != col {
            for j in 0..w {
                aug.swap(col * w + j, pivot_row * w + j);
            }
        }
        let pivot = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug[r * w + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..w {
                aug[r * w + j] -= factor * aug[col * w + j];
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] = aug[i * w + n + j];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![n, n], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_step_gives_identity_and_zero() {
        let a = square(2, &[0.3, -1.0, 0.5, 0.2]);
        let b = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let (a_bar, b_bar) = bilinear_discretize(&a, &b, 0.0).unwrap();
        assert_eq!(a_bar.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b_bar.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_hand_cases() {
        // A=-1, B=1, d=1: A_bar = (1.5)^-1 * 0.5 = 1/3, B_bar = (1.5)^-1 = 2/3.
        let a = square(1, &[-1.0]);
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (a_bar, b_bar) = bilinear_discretize(&a, &b, 1.0).unwrap();
        assert!((a_bar.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((b_bar.data()[0] - 2.0 / 3.0).abs() < 1e-15);

        // A=0, B=1, d=2: A_bar = 1, B_bar = 2.
        let a = square(1, &[0.0]);
        let (a_bar, b_bar) = bilinear_discretize(&a, &b, 2.0).unwrap();
        assert_eq!(a_bar.data()[0], 1.0);
        assert_eq!(b_bar.data()[0], 2.0);
    }

    #[test]
    fn singular_midpoint_matrix_is_reported() {
        // I - d/2 A becomes singular for A = (2/d) I.
        let a = square(1, &[2.0]);
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            bilinear_discretize(&a, &b, 1.0),
            Err(TensorError::Singular { .. })
        ));
    }

    /// Brute-force matrix exponential via Taylor series (test oracle).
    fn matrix_exp(a: &[f64], n: usize, terms: usize) -> Vec<f64> {
        let mut result = vec![0.0; n * n];
        let mut power = vec![0.0; n * n];
        for i in 0..n {
            result[i * n + i] = 1.0;
            power[i * n + i] = 1.0;
        }
        let mut factorial = 1.0;
        for t in 1..=terms {
            power = mat_mul(&power, a, n, n, n);
            factorial *= t as f64;
            for i in 0..n * n {
                result[i] += power[i] / factorial;
            }
        }
        result
    }

    #[test]
    fn bilinear_matches_matrix_exponential_to_third_order() {
        // Pade(1,1) agrees with exp(dA) through O(d^2); difference is O(d^3).
        let a_data = [0.7, -0.3, 0.2, -0.9, 0.4, 0.1, 0.5, -0.2, 0.6];
        let a = square(3, &a_data);
        let b = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let d = 1e-3;
        let (a_bar, _) = bilinear_discretize(&a, &b, d).unwrap();
        let scaled: Vec<f64> = a_data.iter().map(|v| v * d).collect();
        let expected = matrix_exp(&scaled, 3, 12);
        for (got, want) in a_bar.data().iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
        }
    }
}
