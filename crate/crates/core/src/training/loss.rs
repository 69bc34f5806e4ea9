use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Mean over rows of `-log softmax(logits)[target]`, with gradient
/// `(softmax - onehot) / t`.
pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<(f64, Matrix)> {
    cross_entropy_smoothed(logits, targets, 0.0)
}

/// Cross-entropy against `(1 - eps) * onehot + eps / V`.
pub fn cross_entropy_smoothed(logits: &Matrix, targets: &[u32], eps: f64) -> Result<(f64, Matrix)> {
    let (t, v) = logits.shape();
    if targets.len() != t {
        return Err(Error::LengthMismatch { op: "cross_entropy", expected: t, actual: targets.len() });
    }
    if t == 0 {
        return Err(Error::InvalidArgument("cross entropy over zero positions".into()));
    }
    if let Some(&id) = targets.iter().find(|&&id| id as usize >= v) {
        return Err(Error::InvalidToken { id, vocab: v });
    }
    let mut grad = Matrix::zeros(t, v);
    let mut total = 0.0;
    let inv_t = 1.0 / t as f64;
    let off = eps / v as f64;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        let g = grad.row_mut(i);
        for (j, (&x, gj)) in row.iter().zip(g.iter_mut()).enumerate() {
            let logp = x - log_z;
            let q = off + if j == target as usize { 1.0 - eps } else { 0.0 };
            if q > 0.0 {
                total -= q * logp;
            }
            *gj = (logp.exp() - q) * inv_t;
        }
    }
    let loss = total * inv_t;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::uniform_init;

    #[test]
    fn uniform_logits_give_log_v() {
        let (l, _) = cross_entropy(&Matrix::zeros(3, 8), &[0, 3, 7]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_tiny_loss() {
        let mut m = Matrix::zeros(1, 4);
        m.set(0, 2, 1000.0);
        assert!(cross_entropy(&m, &[2]).unwrap().0 < 1e-6);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for eps in [0.0, 0.1] {
            let logits: Matrix = uniform_init(3, 5, 2.0, 4);
            let targets = [1, 4, 0];
            let (_, g) = cross_entropy_smoothed(&logits, &targets, eps).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                for j in 0..5 {
                    let mut a = logits.clone();
                    a.set(i, j, logits.get(i, j) + h);
                    let mut b = logits.clone();
                    b.set(i, j, logits.get(i, j) - h);
                    let fd = (cross_entropy_smoothed(&a, &targets, eps).unwrap().0
                        - cross_entropy_smoothed(&b, &targets, eps).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - g.get(i, j)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn invalid_targets_are_rejected() {
        assert!(matches!(cross_entropy(&Matrix::zeros(1, 3), &[3]), Err(Error::InvalidToken { .. })));
        assert!(cross_entropy(&Matrix::zeros(2, 3), &[0]).is_err());
    }
}
