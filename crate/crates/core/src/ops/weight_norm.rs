//! Weight normalization: `W[o] = gain[o] · v[o] / ‖v[o]‖` for each output channel `o`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows<T: Scalar>(direction: &Tensor<T>, gain: &Tensor<T>) -> Result<(usize, usize)> {
    let out = *direction
        .shape()
        .first()
        .ok_or_else(|| Error::invalid("weight_norm", "direction must have an output axis"))?;
    if gain.shape() != [out] {
        return Err(Error::shape("weight_norm", &[out], gain.shape()));
    }
    Ok((out, direction.len() / out.max(1)))
}

/// Returns the effective kernel and the per-channel direction norms.
///
/// A zero direction row yields a zero kernel row.
pub fn weight_norm<T: Scalar>(
    direction: &Tensor<T>,
    gain: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (out, per) = rows(direction, gain)?;
    let mut w = direction.clone();
    let mut norms = Vec::with_capacity(out);
    for (row, &g) in w.data_mut().chunks_mut(per).zip(gain.data()) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(norm);
        let s = if norm > T::zero() { g / norm } else { T::zero() };
        for v in row {
            *v *= s;
        }
    }
    Ok((w, norms))
}

pub fn weight_norm_backward<T: Scalar>(
    direction: &Tensor<T>,
    gain: &Tensor<T>,
    norms: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, per) = rows(direction, gain)?;
    direction.expect_same_shape(grad_out, "weight_norm_backward")?;
    let mut dv = vec![T::zero(); direction.len()];
    let mut dg = vec![T::zero(); out];
    for o in 0..out {
        let norm = norms[o];
        if norm <= T::zero() {
            continue;
        }
        let v = &direction.data()[o * per..(o + 1) * per];
        let dw = &grad_out.data()[o * per..(o + 1) * per];
        let proj = v.iter().zip(dw).map(|(&a, &b)| a * b).sum::<T>() / norm;
        dg[o] = proj;
        let s = gain.data()[o] / norm;
        for ((d, &vi), &gi) in dv[o * per..(o + 1) * per].iter_mut().zip(v).zip(dw) {
            *d = s * (gi - vi / norm * proj);
        }
    }
    Ok((Tensor::new(direction.shape(), dv)?, Tensor::new(&[out], dg)?))
}
