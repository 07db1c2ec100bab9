use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A loss over a block of logit rows `[R, K]`.
///
/// Implementations return the mean over rows and its gradient with respect
/// to every logit.
pub trait LogitLoss<T: Scalar>: Send + Sync {
    fn value_and_grad(&self, logits: &Tensor<T>) -> Result<(T, Tensor<T>)>;
}

impl<T: Scalar, L: LogitLoss<T> + ?Sized> LogitLoss<T> for Box<L> {
    fn value_and_grad(&self, logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        (**self).value_and_grad(logits)
    }
}

fn rows_of<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match *logits.shape() {
        [r, k] => Ok((r, k)),
        ref s => Err(Error::Shape(format!("logits must be [N, K], got {s:?}"))),
    }
}

/// Numerically stable `log Σ exp(z)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln()
}

pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows_of(logits)?;
    let data = logits
        .data()
        .chunks_exact(k)
        .flat_map(softmax_row)
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Mean softmax cross-entropy against integer labels.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub labels: Vec<usize>,
}

impl<T: Scalar> LogitLoss<T> for CrossEntropy {
    fn value_and_grad(&self, logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let (r, k) = rows_of(logits)?;
        if self.labels.len() != r {
            return Err(Error::Shape(format!(
                "{} labels for {r} logit rows",
                self.labels.len()
            )));
        }
        let scale = T::one() / T::of(r as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(r * k);
        for (row, &y) in logits.data().chunks_exact(k).zip(&self.labels) {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
            total = total + (log_sum_exp(row) - row[y]);
            let p = softmax_row(row);
            grad.extend(
                p.iter()
                    .enumerate()
                    .map(|(j, &pj)| (if j == y { pj - T::one() } else { pj }) * scale),
            );
        }
        Ok((total * scale, Tensor::new(vec![r, k], grad)?))
    }
}

/// Mean cross-entropy of the softmax output against the uniform
/// distribution; equals `ln K` exactly at uniform output, its minimum.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformTarget;

impl<T: Scalar> LogitLoss<T> for UniformTarget {
    fn value_and_grad(&self, logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let (r, k) = rows_of(logits)?;
        if k < 2 {
            return Err(Error::Shape("uniformity needs at least 2 classes".into()));
        }
        let scale = T::one() / T::of(r as f64);
        let inv_k = T::one() / T::of(k as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(r * k);
        for row in logits.data().chunks_exact(k) {
            let lse = log_sum_exp(row);
            let mean_logit = row.iter().copied().sum::<T>() * inv_k;
            total = total + (lse - mean_logit);
            grad.extend(softmax_row(row).into_iter().map(|p| (p - inv_k) * scale));
        }
        Ok((total * scale, Tensor::new(vec![r, k], grad)?))
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    CrossEntropy {
        labels: labels.to_vec(),
    }
    .value_and_grad(logits)
    .map(|(v, _)| v)
}

/// Mean cross-entropy from the uniform distribution to `softmax(logits)`.
pub fn kl_to_uniform<T: Scalar>(logits: &Tensor<T>) -> Result<T> {
    UniformTarget.value_and_grad(logits).map(|(v, _)| v)
}
