use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Vector};

/// Layer-norm stabilizer added under the square root.
pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean and `sqrt(var + eps)` of one vector (population variance).
pub(crate) fn moments(z: &[f64], eps: f64) -> (f64, f64) {
    let d = z.len() as f64;
    let mu = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, (var + eps).sqrt())
}

/// `gamma ⊙ (z − μ) / sqrt(σ² + eps) + beta`.
pub fn layer_norm(z: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vector> {
    if gamma.len() != z.len() || beta.len() != z.len() {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "z {} gamma {} beta {}",
                z.len(),
                gamma.len(),
                beta.len()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let (mu, sd) = moments(z, eps);
    Ok(z
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mu) / sd + b)
        .collect())
}

pub fn relu(z: &[f64]) -> Vector {
    z.iter().map(|&v| v.max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![2f64.ln(), 0.0, f64::MIN]])
            .unwrap();
        let s = softmax_rows(&m);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let row = vec![0.3, -1.2, 2.5, 0.0];
        let a = softmax_rows(&Matrix::row_vector(&row));
        let shifted: Vec<f64> = row.iter().map(|v| v + 100.0).collect();
        let b = softmax_rows(&Matrix::row_vector(&shifted));
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0, 1.0];
        let zeros = [0.0, 0.0];
        let y = layer_norm(&[1.0, -1.0], &ones, &zeros, LN_EPS).unwrap();
        assert!((y[0] - 1.0).abs() <= 1e-4 && (y[1] + 1.0).abs() <= 1e-4);
        let y = layer_norm(&[2.0, 0.0], &ones, &zeros, LN_EPS).unwrap();
        assert!((y[0] - 1.0).abs() <= 1e-4 && (y[1] + 1.0).abs() <= 1e-4);
        let y = layer_norm(&[7.0, -3.0], &zeros, &[5.0, 5.0], LN_EPS).unwrap();
        assert_eq!(y, vec![5.0, 5.0]);
    }

    #[test]
    fn layer_norm_constant_input_stays_finite() {
        let y = layer_norm(&[3.0; 8], &[1.0; 8], &[0.0; 8], LN_EPS).unwrap();
        assert!(y.iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], LN_EPS),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-1.0, -3.0]), vec![0.0, 0.0]);
        assert_eq!(relu(&[0.5, 3.0]), vec![0.5, 3.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let s = softmax_rows(&Matrix::row_vector(&vals));
            let total: f64 = s.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(0).iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn layer_norm_standardizes(vals in prop::collection::vec(-10.0f64..10.0, 2..64)) {
            let d = vals.len();
            let (_, sd) = moments(&vals, 0.0);
            prop_assume!(sd > 1e-2);
            let y = layer_norm(&vals, &vec![1.0; d], &vec![0.0; d], LN_EPS).unwrap();
            let (mu, sd_out) = moments(&y, 0.0);
            prop_assert!(mu.abs() < 1e-10);
            // eps shrinks the output std slightly below one
            prop_assert!((sd_out - 1.0).abs() < LN_EPS / (sd * sd));
        }
    }
}
