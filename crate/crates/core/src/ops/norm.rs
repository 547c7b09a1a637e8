//! Group normalization with a per-channel affine transform.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormSaved<T> {
    /// Normalized input before the affine transform.
    pub normalized: Tensor<T>,
    /// `1/sqrt(var + eps)` per (sample, group).
    pub inv_std: Vec<T>,
    pub groups: usize,
}

fn check<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels are not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] {
        return Err(Error::shape("group_norm", &[c], gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("group_norm", &[c], beta.shape()));
    }
    Ok((n, c, h * w))
}

/// Normalizes each group of `C/groups` channels over its channels and spatial extent.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormSaved<T>)> {
    let (n, c, plane) = check(input, groups, gamma, beta)?;
    let per_group = c / groups * plane;
    let count = T::from_usize_lossy(per_group);
    let eps = T::from_f64_lossy(eps);
    let mut normalized = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for (gi, (src, (dst_n, dst_y))) in input
        .data()
        .chunks(per_group)
        .zip(normalized.chunks_mut(per_group).zip(out.chunks_mut(per_group)))
        .enumerate()
    {
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let first_channel = (gi % groups) * (c / groups);
        for (j, (&v, (xn, y))) in src
            .iter()
            .zip(dst_n.iter_mut().zip(dst_y.iter_mut()))
            .enumerate()
        {
            let ch = first_channel + j / plane;
            *xn = (v - mean) * inv;
            *y = *xn * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        GroupNormSaved {
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
            groups,
        },
    ))
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn group_norm_backward<T: Scalar>(
    saved: &GroupNormSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let xhat = &saved.normalized;
    xhat.expect_same_shape(grad_out, "group_norm_backward")?;
    let (_, c, h, w) = xhat.dims4("group_norm_backward")?;
    let plane = h * w;
    let groups = saved.groups;
    let per_group = c / groups * plane;
    let count = T::from_usize_lossy(per_group);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); xhat.len()];
    for (gi, ((xg, dyg), dxg)) in xhat
        .data()
        .chunks(per_group)
        .zip(grad_out.data().chunks(per_group))
        .zip(dx.chunks_mut(per_group))
        .enumerate()
    {
        let first_channel = (gi % groups) * (c / groups);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for (j, (&xn, &dy)) in xg.iter().zip(dyg).enumerate() {
            let ch = first_channel + j / plane;
            dgamma[ch] += dy * xn;
            dbeta[ch] += dy;
            let dxn = dy * gamma.data()[ch];
            mean_dxhat += dxn;
            mean_dxhat_xhat += dxn * xn;
        }
        mean_dxhat /= count;
        mean_dxhat_xhat /= count;
        let inv = saved.inv_std[gi];
        for (j, ((&xn, &dy), d)) in xg.iter().zip(dyg).zip(dxg.iter_mut()).enumerate() {
            let ch = first_channel + j / plane;
            let dxn = dy * gamma.data()[ch];
            *d = inv * (dxn - mean_dxhat - xn * mean_dxhat_xhat);
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(xhat.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[4, 3, 3], 2.5);
        let (y, _) = group_norm(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), GROUP_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let x = Tensor::<f64>::from_fn(&[4, 2, 2], |i| i as f64);
        let (y, _) = group_norm(&x, 4, &Tensor::zeros(&[4]), &Tensor::full(&[4], 0.7), GROUP_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::<f32>::zeros(&[6, 2, 2]);
        let err = group_norm(&x, 4, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), GROUP_NORM_EPS);
        assert!(matches!(err, Err(Error::InvalidArgument { .. })));
    }
}
