//! Classification and dense-labeling metrics computed from logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Arg-max along the class axis of `[N, K]` or `[N, K, H, W]` logits,
/// one prediction per position in `[N][H][W]` order.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k, spatial) = match *logits.shape() {
        [n, k] => (n, k, 1),
        [n, k, h, w] => (n, k, h * w),
        _ => return Err(Error::invalid("predictions", "logits must be rank 2 or 4")),
    };
    let d = logits.data();
    let mut out = Vec::with_capacity(n * spatial);
    for b in 0..n {
        for p in 0..spatial {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * spatial + p] > d[(b * k + best) * spatial + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under softmax of the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, k, spatial) = match *logits.shape() {
        [n, k] => (n, k, 1),
        [n, k, h, w] => (n, k, h * w),
        _ => return Err(Error::invalid("cross_entropy", "logits must be rank 2 or 4")),
    };
    if labels.len() != n * spatial || labels.iter().any(|&l| l >= k) {
        return Err(Error::invalid("cross_entropy", "labels do not match the logits"));
    }
    let d = logits.data();
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..spatial {
            let at = |c: usize| d[(b * k + c) * spatial + p].to_f64_lossy();
            let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
            total += lse - at(labels[b * spatial + p]);
        }
    }
    Ok(total / (n * spatial) as f64)
}

/// Square confusion matrix, `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("Confusion::add", "length mismatch"));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::invalid("Confusion::add", format!("label {t}/{p} out of range")));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// Intersection over union averaged over classes that occur in either
    /// the truth or the predictions.
    pub fn mean_iou(&self) -> f64 {
        let k = self.classes;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
            let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_correct_two_class_mask() {
        // truth 0 0 1 1, predicted 0 1 1 0: IoU 1/3 for both classes
        let mut c = Confusion::new(2);
        c.add(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap();
        assert_eq!(c.accuracy(), 0.5);
        assert!((c.mean_iou() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(c.accuracy(), 1.0);
        assert_eq!(c.mean_iou(), 1.0);
    }

    #[test]
    fn argmax_over_channel_axis() {
        let t = Tensor::<f64>::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(predictions(&t).unwrap(), vec![0, 1]);
    }
}
