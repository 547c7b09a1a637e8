//! 2-D cross-correlation with zero padding.
//!
//! The fast path lowers each sample to a column matrix and multiplies it with
//! the kernel matrix; [`conv2d_direct`] is the plain nested-loop form kept as
//! the reference the lowering is checked against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `floor((extent + 2·padding − k) / stride) + 1`, rejecting non-positive results.
pub fn conv_output_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} larger than padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c_in, h, w) = input.dims4("conv2d")?;
        let [c_out, kc, kh, kw] = *kernel.shape() else {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be [C_out,C_in,k,k], got {:?}", kernel.shape()),
            ));
        };
        if kh != kw {
            return Err(Error::invalid("conv2d", "only square kernels are supported"));
        }
        if kc != c_in {
            return Err(Error::shape("conv2d", &[c_out, c_in, kh, kw], kernel.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", &[c_out], b.shape()));
            }
        }
        let ho = conv_output_extent(h, kh, stride, padding)?;
        let wo = conv_output_extent(w, kw, stride, padding)?;
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            ho,
            wo,
        })
    }

    pub fn output_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.c_out, self.ho, self.wo]
        } else {
            vec![self.n, self.c_out, self.ho, self.wo]
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c_in {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.source(oy, ky, self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.w) {
                                        Some(ix) => src[iy * self.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c_in {
            let dst = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[iy * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` (`[C_in,H,W]` or `[N,C_in,H,W]`) with `kernel` (`[C_out,C_in,k,k]`).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.out_plane()]
    };
    for s in 0..g.n {
        let x = &input.data()[s * in_sample..(s + 1) * in_sample];
        let y = &mut out[s * out_sample..(s + 1) * out_sample];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(g.out_plane()).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        T::gemm(
            g.c_out,
            g.col_rows(),
            g.out_plane(),
            T::one(),
            kernel.data(),
            false,
            rhs,
            false,
            beta,
            y,
        );
    }
    Tensor::new(&g.output_shape(input.rank()), out)
}

/// Reference nested-loop convolution; same contract as [`conv2d`].
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = Vec::with_capacity(g.n * g.c_out * g.out_plane());
    for s in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            let Some(iy) = g.source(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..g.k {
                                let Some(ix) = g.source(ox, kx, g.w) else {
                                    continue;
                                };
                                acc += wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * x[((s * g.c_in + ci) * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&g.output_shape(input.rank()), out)
}

/// Cotangents of a convolution; each is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, kernel, None, stride, padding)?;
    let expected = g.output_shape(input.rank());
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
    }
    let in_sample = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_sample = g.c_out * plane;
    let mut dx = want_input.then(|| vec![T::zero(); input.len()]);
    let mut dw = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want_bias.then(|| vec![T::zero(); g.c_out]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    for s in 0..g.n {
        let x = &input.data()[s * in_sample..(s + 1) * in_sample];
        let dy = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dy.chunks(plane).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if g.is_pointwise() {
                x
            } else {
                g.im2col(x, &mut col);
                &col
            };
            T::gemm(g.c_out, plane, g.col_rows(), T::one(), dy, false, rhs, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
            if g.is_pointwise() {
                T::gemm(g.c_in, g.c_out, plane, T::one(), kernel.data(), true, dy, false, T::one(), dxs);
            } else {
                T::gemm(
                    g.col_rows(),
                    g.c_out,
                    plane,
                    T::one(),
                    kernel.data(),
                    true,
                    dy,
                    false,
                    T::zero(),
                    &mut col,
                );
                g.col2im(&col, dxs);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        kernel: dw.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(&[g.c_out], d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn output_extent_closed_form() {
        assert_eq!(conv_output_extent(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv_output_extent(7, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv_output_extent(8, 1, 1, 0).unwrap(), 8);
        assert!(conv_output_extent(1, 3, 1, 0).is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn lowered_matches_direct_with_stride_and_batch() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let k = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 17 % 7) as f64 - 3.0) / 5.0);
        let b = Tensor::from_fn(&[4], |i| i as f64);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let fast = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let slow = conv2d_direct(&x, &k, Some(&b), stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }
}
