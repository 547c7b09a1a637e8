//! Multi-resolution state `z = [z₁ … zₙ]` and its flat-vector encoding.
//!
//! ## Flat layout
//!
//! Each scale tensor is `[N, Cᵢ, Hᵢ, Wᵢ]`. The flat vector is sample-major,
//! then scale-major: all of sample 0 (scale 1, then scale 2, …), then all of
//! sample 1, and so on. For a single sample this is plain scale-major order,
//! and every sample occupies one contiguous segment of equal length, which is
//! what the blocked solver expects.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleState<T> {
    scales: Vec<Tensor<T>>,
}

/// Per-scale `(C, H, W)` extents.
pub type ScaleShapes = Vec<(usize, usize, usize)>;

impl<T: Scalar> MultiscaleState<T> {
    /// Validates `n ≥ 2`, a shared batch size, and exact halving of the spatial size.
    pub fn new(scales: Vec<Tensor<T>>) -> Result<Self> {
        if scales.len() < 2 {
            return Err(Error::invalid("multiscale_state", "at least two scales are required"));
        }
        let (n0, _, h0, w0) = scales[0].dims4("multiscale_state")?;
        for (i, s) in scales.iter().enumerate() {
            if s.rank() != 4 {
                return Err(Error::invalid("multiscale_state", "scale tensors must be [N,C,H,W]"));
            }
            let (n, _, h, w) = s.dims4("multiscale_state")?;
            let div = 1 << i;
            if n != n0 || h * div != h0 || w * div != w0 {
                return Err(Error::invalid(
                    "multiscale_state",
                    format!("scale {} has shape {:?}, inconsistent with {:?}", i + 1, s.shape(), scales[0].shape()),
                ));
            }
        }
        Ok(Self { scales })
    }

    pub fn zeros(batch: usize, shapes: &[(usize, usize, usize)]) -> Result<Self> {
        Self::new(
            shapes
                .iter()
                .map(|&(c, h, w)| Tensor::zeros(&[batch, c, h, w]))
                .collect(),
        )
    }

    pub fn scales(&self) -> &[Tensor<T>] {
        &self.scales
    }

    pub fn into_scales(self) -> Vec<Tensor<T>> {
        self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn batch(&self) -> usize {
        self.scales[0].shape()[0]
    }

    pub fn scale_shapes(&self) -> ScaleShapes {
        self.scales
            .iter()
            .map(|s| (s.shape()[1], s.shape()[2], s.shape()[3]))
            .collect()
    }

    /// Flat length: `N · Σᵢ Cᵢ·Hᵢ·Wᵢ`.
    pub fn flat_len(&self) -> usize {
        self.scales.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let n = self.batch();
        let mut out = Vec::with_capacity(self.flat_len());
        for s in 0..n {
            for t in &self.scales {
                let per = t.len() / n;
                out.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        out
    }

    pub fn unflatten(flat: &[T], batch: usize, shapes: &[(usize, usize, usize)]) -> Result<Self> {
        let per_sample: usize = shapes.iter().map(|&(c, h, w)| c * h * w).sum();
        if flat.len() != batch * per_sample {
            return Err(Error::shape("unflatten", &[batch * per_sample], &[flat.len()]));
        }
        let mut bufs: Vec<Vec<T>> = shapes
            .iter()
            .map(|&(c, h, w)| Vec::with_capacity(batch * c * h * w))
            .collect();
        for sample in flat.chunks(per_sample.max(1)) {
            let mut off = 0;
            for (buf, &(c, h, w)) in bufs.iter_mut().zip(shapes) {
                buf.extend_from_slice(&sample[off..off + c * h * w]);
                off += c * h * w;
            }
        }
        let scales = bufs
            .into_iter()
            .zip(shapes)
            .map(|(b, &(c, h, w))| Tensor::new(&[batch, c, h, w], b))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }

    /// Range of flat indices holding scale `scale` (0-based) of sample `sample`.
    pub fn flat_segment(&self, sample: usize, scale: usize) -> std::ops::Range<usize> {
        let shapes = self.scale_shapes();
        let per_sample: usize = shapes.iter().map(|&(c, h, w)| c * h * w).sum();
        let before: usize = shapes[..scale].iter().map(|&(c, h, w)| c * h * w).sum();
        let (c, h, w) = shapes[scale];
        let start = sample * per_sample + before;
        start..start + c * h * w
    }

    pub fn map_scales(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Result<Self> {
        Self::new(self.scales.iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> ScaleShapes {
        vec![(2, 8, 8), (4, 4, 4), (8, 2, 2)]
    }

    #[test]
    fn length_is_sum_of_extents() {
        let s = MultiscaleState::<f64>::zeros(3, &shapes()).unwrap();
        assert_eq!(s.flat_len(), 3 * (128 + 64 + 32));
        assert_eq!(s.flatten().len(), s.flat_len());
    }

    #[test]
    fn rejects_non_halving_scales() {
        let bad = vec![Tensor::<f32>::zeros(&[1, 2, 8, 8]), Tensor::zeros(&[1, 2, 3, 4])];
        assert!(MultiscaleState::new(bad).is_err());
        assert!(MultiscaleState::new(vec![Tensor::<f32>::zeros(&[1, 2, 8, 8])]).is_err());
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(MultiscaleState::<f64>::unflatten(&[0.0; 5], 1, &shapes()).is_err());
    }
}
