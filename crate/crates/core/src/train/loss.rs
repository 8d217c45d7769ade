//! Softmax cross-entropy.

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct LossOutput<T> {
    /// Mean loss over the batch.
    pub loss: T,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor<T>,
    pub correct: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `logits` is `(n, classes, 1, 1)` (any `h * w == 1` layout).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<LossOutput<T>> {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    if labels.len() != s.n {
        return Err(config_err(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    let mut correct = 0;
    let inv_n = T::one() / T::lit(s.n.max(1) as f64);
    for (n, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= k {
            return Err(config_err(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += z.ln() + m - row[label];
        if argmax(row) == label {
            correct += 1;
        }
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (i, (gv, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = *e / z;
            *gv = (if i == label { p - T::one() } else { p }) * inv_n;
        }
    }
    Ok(LossOutput {
        loss: total * inv_n,
        grad,
        correct,
    })
}
