use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy and its gradient with respect to the logits.
///
/// The gradient is `(softmax − onehot) / batch`. Logits are shifted by
/// their row maximum before exponentiation.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let loss = softmax_cross_entropy_loss(logits, labels)?;
    let (n, classes) = (logits.rows(), logits.row_len());
    let scale = T::one() / T::from_usize(n).unwrap();
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let onehot = if c == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * scale);
        }
    }
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}

/// Loss value only; shares validation with [`softmax_cross_entropy`].
pub fn softmax_cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.shape().len() != 2 {
        return Err(Error::config(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    }
    let (n, classes) = (logits.rows(), logits.row_len());
    if labels.len() != n {
        return Err(Error::config(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} at row {r} outside [0, {classes})")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_denom = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += log_denom - (row[label] - max);
    }
    Ok(total / T::from_usize(n).unwrap())
}

/// Index of the largest logit per row; first index wins ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2usize, 3, 10] {
            let logits = Tensor::<f64>::full(&[4, classes], 0.7);
            let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_prediction() {
        let logits = Tensor::<f64>::from_rows(&[&[10.0, -10.0]]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-8);
        assert!(grad.data()[0].abs() < 1e-8);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let logits = Tensor::<f64>::from_fn(&[3, 4], |i| ((i * 29) % 13) as f64 * 0.3 - 1.7);
        let labels = [2, 0, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy_loss(&plus, &labels).unwrap()
                - softmax_cross_entropy_loss(&minus, &labels).unwrap())
                / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(fd.abs()).max(1e-3), "{i}: {fd} vs {g}");
        }
    }

    #[test]
    fn huge_logits_stay_finite() {
        let logits = Tensor::<f32>::from_rows(&[&[1e30, -1e30, 0.0]]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.is_finite());
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[0, 3]), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Tensor::<f32>::from_rows(&[&[1.0, 3.0, 3.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
    }
}
