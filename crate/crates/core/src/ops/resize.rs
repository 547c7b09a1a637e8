//! Bilinear upsampling with half-pixel (align-corners-false) sampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-coordinate interpolation taps along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(extent: usize, factor: usize) -> Vec<Tap<T>> {
    let scale = 1.0 / factor as f64;
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(src - lo as f64),
            }
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("factor must be a power of two ≥ 2, got {factor}"),
        ));
    }
    Ok(())
}

fn output_shape(rank: usize, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if rank == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let (n, c, h, w) = input.dims4("bilinear_upsample")?;
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps::<T>(h, factor);
    let tx = taps::<T>(w, factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for src in input.data().chunks(h * w) {
        for y in &ty {
            for x in &tx {
                let top = src[y.lo * w + x.lo] * (T::one() - x.frac) + src[y.lo * w + x.hi] * x.frac;
                let bottom = src[y.hi * w + x.lo] * (T::one() - x.frac) + src[y.hi * w + x.hi] * x.frac;
                out.push(top * (T::one() - y.frac) + bottom * y.frac);
            }
        }
    }
    Tensor::new(&output_shape(input.rank(), n, c, ho, wo), out)
}

/// Adjoint of [`bilinear_upsample`]: scatters output cotangents back to the source grid.
pub fn bilinear_upsample_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let probe = Tensor::<T>::zeros(input_shape);
    let (n, c, h, w) = probe.dims4("bilinear_upsample_backward")?;
    let (ho, wo) = (h * factor, w * factor);
    let expected = output_shape(input_shape.len(), n, c, ho, wo);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape("bilinear_upsample_backward", &expected, grad_out.shape()));
    }
    let ty = taps::<T>(h, factor);
    let tx = taps::<T>(w, factor);
    let mut dx = vec![T::zero(); probe.len()];
    for (dst, dy) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let g = dy[oy * wo + ox];
                let gt = g * (T::one() - y.frac);
                let gb = g * y.frac;
                dst[y.lo * w + x.lo] += gt * (T::one() - x.frac);
                dst[y.lo * w + x.hi] += gt * x.frac;
                dst[y.hi * w + x.lo] += gb * (T::one() - x.frac);
                dst[y.hi * w + x.hi] += gb * x.frac;
            }
        }
    }
    Tensor::new(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 5], 3.0);
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_sample_replicates() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![-1.25]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.data(), &[-1.25; 4]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(bilinear_upsample(&x, 3).is_err());
        assert!(bilinear_upsample(&x, 1).is_err());
        assert_eq!(bilinear_upsample(&x, 4).unwrap().shape(), &[1, 8, 8]);
    }
}
