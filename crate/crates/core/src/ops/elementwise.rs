use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multiplies every `[H,W]` plane of `input` (`[N,C,H,W]`) by `mask[n,c]`.
pub fn channel_mask<T: Scalar>(input: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("channel_mask")?;
    if mask.len() != n * c {
        return Err(Error::shape("channel_mask", &[n, c], mask.shape()));
    }
    let mut out = input.clone();
    for (plane, &m) in out.data_mut().chunks_mut(h * w).zip(mask.data()) {
        for v in plane {
            *v *= m;
        }
    }
    Ok(out)
}
