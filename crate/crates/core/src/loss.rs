use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(z)` against class `y`, and its gradient
/// `softmax(z) - onehot(y)` with respect to the logits.
pub fn cross_entropy_with_logits(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            z.len()
        )));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    // rounding can leave a tiny negative; NaN must pass through
    let raw = lse - z[y];
    let loss = if raw < 0.0 { 0.0 } else { raw };
    let mut grad = softmax(z);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_two_class() {
        let (loss, grad) = cross_entropy_with_logits(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let (loss, _) = cross_entropy_with_logits(&[10.0, -10.0], 0).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn label_out_of_range() {
        assert!(cross_entropy_with_logits(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn gradient_sums_to_zero_and_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = rng.random_range(0..5);
            let (loss, grad) = cross_entropy_with_logits(&z, y).unwrap();
            assert!(loss >= 0.0);
            assert!(grad.iter().sum::<f64>().abs() < 1e-14);
            let h = 1e-6;
            let fd: Vec<f64> = (0..5)
                .map(|k| {
                    let mut a = z.clone();
                    a[k] += h;
                    let mut b = z.clone();
                    b[k] -= h;
                    (cross_entropy_with_logits(&a, y).unwrap().0
                        - cross_entropy_with_logits(&b, y).unwrap().0)
                        / (2.0 * h)
                })
                .collect();
            let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < 1e-6);
        }
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
