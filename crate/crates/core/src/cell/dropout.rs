//! Variational dropout: one channel mask per scale, sampled once per training
//! step and shared by every cell invocation of that step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    id: u64,
    /// Per-scale `[N, Cᵢ]` keep factors (0 or `1/(1−p)`); `None` is the identity.
    masks: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> DropoutMask<T> {
    /// The inference mask.
    pub fn identity() -> Self {
        Self { id: 0, masks: None }
    }

    /// Samples a mask for a batch of `batch` samples with the given per-scale channels.
    ///
    /// The mask id is derived from `seed`, so distinct seeds give distinct ids.
    pub fn sample(rate: f64, batch: usize, channels: &[usize], seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate must be in [0,1), got {rate}")));
        }
        let id = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        if rate == 0.0 {
            return Ok(Self { id, masks: None });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let masks = channels
            .iter()
            .map(|&c| {
                Tensor::from_fn(&[batch, c], |_| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
            })
            .collect();
        Ok(Self {
            id,
            masks: Some(masks),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_identity(&self) -> bool {
        self.masks.is_none()
    }

    pub fn scale(&self, i: usize) -> Option<&Tensor<T>> {
        self.masks.as_ref().map(|m| &m[i])
    }

    /// Restricts a batch mask to the samples in `range`.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let Some(masks) = &self.masks else {
            return Ok(self.clone());
        };
        let sliced = masks
            .iter()
            .map(|m| {
                let c = m.shape()[1];
                Tensor::new(&[range.len(), c], m.data()[range.start * c..range.end * c].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: self.id,
            masks: Some(sliced),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_factor_and_rate() {
        let m = DropoutMask::<f64>::sample(0.25, 64, &[16], 3).unwrap();
        let t = m.scale(0).unwrap();
        let kept = t.data().iter().filter(|&&v| v > 0.0).count();
        assert!(t.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let frac = kept as f64 / t.len() as f64;
        assert!((frac - 0.75).abs() < 0.05, "kept fraction {frac}");
    }

    #[test]
    fn ids_differ_across_seeds() {
        let a = DropoutMask::<f32>::sample(0.2, 2, &[4, 8], 1).unwrap();
        let b = DropoutMask::<f32>::sample(0.2, 2, &[4, 8], 2).unwrap();
        assert_ne!(a.id(), b.id());
        assert!(DropoutMask::<f32>::identity().is_identity());
    }
}
