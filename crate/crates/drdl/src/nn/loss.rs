//! Softmax cross-entropy, stabilized with the log-sum-exp trick. Batch
//! inputs reduce to the mean; each call also returns the gradient with
//! respect to the logits so callers can seed backpropagation directly.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn log_sum_exp_row<T: Scalar>(row: &[T]) -> (T, T) {
    let mut m = row[0];
    for v in row.iter().skip(1) {
        if *v > m {
            m = *v;
        }
    }
    let mut s = T::zero();
    for v in row {
        s += (*v - m).exp();
    }
    (m, m + s.ln())
}

/// Mean cross-entropy of `logits` (N, K) against hard class targets.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2, "softmax_cross_entropy logits")?;
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy targets".into(),
            expected: vec![n],
            got: vec![targets.len()],
        });
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let inv_n = T::from_f64(1.0 / n as f64);
    let ld = logits.data();
    let dd = dlogits.data_mut();
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::ClassOutOfRange {
                index: y,
                width: k,
                context: "softmax_cross_entropy".into(),
            });
        }
        let row = &ld[i * k..(i + 1) * k];
        let (_, lse) = log_sum_exp_row(row);
        total += lse - row[y];
        let drow = &mut dd[i * k..(i + 1) * k];
        for (j, v) in row.iter().enumerate() {
            drow[j] = (*v - lse).exp() * inv_n;
        }
        drow[y] -= inv_n;
    }
    Ok((total * inv_n, dlogits))
}

/// Mean cross-entropy against the uniform distribution over all K classes:
/// lse(logits) - mean(logits). Minimized (value ln K) exactly at uniform
/// logits; used to strip class information from a feature stream.
pub fn cross_entropy_uniform<T: Scalar>(logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2, "cross_entropy_uniform logits")?;
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let inv_n = T::from_f64(1.0 / n as f64);
    let inv_k = T::from_f64(1.0 / k as f64);
    let ld = logits.data();
    let dd = dlogits.data_mut();
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let (_, lse) = log_sum_exp_row(row);
        let mut mean_logit = T::zero();
        for v in row {
            mean_logit += *v;
        }
        mean_logit *= inv_k;
        total += lse - mean_logit;
        let drow = &mut dd[i * k..(i + 1) * k];
        for (j, v) in row.iter().enumerate() {
            drow[j] = ((*v - lse).exp() - inv_k) * inv_n;
        }
    }
    Ok((total * inv_n, dlogits))
}
