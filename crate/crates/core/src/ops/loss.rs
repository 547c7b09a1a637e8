//! Softmax cross-entropy with mean reduction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class axis layout of a logits tensor: `[N,K]` or per-pixel `[N,K,H,W]`.
fn layout<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *logits.shape() {
        [n, k] => Ok((n, k, 1)),
        [n, k, h, w] => Ok((n, k, h * w)),
        _ => Err(Error::invalid(
            "softmax_cross_entropy",
            format!("logits must be [N,K] or [N,K,H,W], got {:?}", logits.shape()),
        )),
    }
}

/// Returns the mean loss over all `N·H·W` positions and the softmax probabilities.
///
/// `labels` holds one class index per position, in `[N][H][W]` order.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k, plane) = layout(logits)?;
    if labels.len() != n * plane {
        return Err(Error::shape("softmax_cross_entropy", &[n * plane], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let data = logits.data();
    for s in 0..n {
        for p in 0..plane {
            let at = |c: usize| (s * k + c) * plane + p;
            let max = (0..k).map(|c| data[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (data[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] /= z;
            }
            let label = labels[s * plane + p];
            total += z.ln() + max - data[at(label)];
        }
    }
    let count = T::from_usize_lossy(n * plane);
    Ok((total / count, Tensor::new(logits.shape(), probs)?))
}

/// Cotangent of the logits given the upstream scalar cotangent `grad`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad: T,
) -> Result<Tensor<T>> {
    let (n, k, plane) = layout(probs)?;
    let scale = grad / T::from_usize_lossy(n * plane);
    let mut d = probs.scale(scale);
    for s in 0..n {
        for p in 0..plane {
            let label = labels[s * plane + p];
            d.data_mut()[(s * k + label) * plane + p] -= scale;
        }
    }
    Ok(d)
}

/// Index of the largest logit per position, in `[N][H][W]` order.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k, plane) = layout(logits)?;
    let data = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if data[(s * k + c) * plane + p] > data[(s * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 0]).is_err());
    }
}
