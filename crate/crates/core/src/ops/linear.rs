use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows_cols<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize)> {
    match input.shape() {
        [] => Err(Error::invalid("dense", "input must have a batch axis")),
        [n, rest @ ..] => Ok((*n, rest.iter().product())),
    }
}

/// `y[n] = W · x[n] + b`, with every trailing axis of `input` flattened into features.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, features) = rows_cols(input)?;
    let [out_f, in_f] = *weight.shape() else {
        return Err(Error::invalid("dense", "weight must be [out, in]"));
    };
    if in_f != features {
        return Err(Error::shape("dense", &[out_f, features], weight.shape()));
    }
    let mut out = vec![T::zero(); n * out_f];
    let beta = match bias {
        Some(b) => {
            if b.shape() != [out_f] {
                return Err(Error::shape("dense", &[out_f], b.shape()));
            }
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(b.data());
            }
            T::one()
        }
        None => T::zero(),
    };
    T::gemm(n, in_f, out_f, T::one(), input.data(), false, weight.data(), true, beta, &mut out);
    Tensor::new(&[n, out_f], out)
}

pub struct DenseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<DenseGrads<T>> {
    let (n, in_f) = rows_cols(input)?;
    let out_f = weight.shape()[0];
    if grad_out.shape() != [n, out_f] {
        return Err(Error::shape("dense_backward", &[n, out_f], grad_out.shape()));
    }
    let dx = want_input.then(|| {
        let mut dx = vec![T::zero(); n * in_f];
        T::gemm(n, out_f, in_f, T::one(), grad_out.data(), false, weight.data(), false, T::zero(), &mut dx);
        Tensor::new(input.shape(), dx)
    });
    let dw = want_weight.then(|| {
        let mut dw = vec![T::zero(); out_f * in_f];
        T::gemm(out_f, n, in_f, T::one(), grad_out.data(), true, input.data(), false, T::zero(), &mut dw);
        Tensor::new(weight.shape(), dw)
    });
    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); out_f];
        for row in grad_out.data().chunks(out_f) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::new(&[out_f], db)
    });
    Ok(DenseGrads {
        input: dx.transpose()?,
        weight: dw.transpose()?,
        bias: db.transpose()?,
    })
}

/// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let inv = T::one() / T::from_usize_lossy(h * w);
    let data = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let (n, c, h, w) = probe.dims4("global_avg_pool_backward")?;
    if grad_out.len() != n * c {
        return Err(Error::shape("global_avg_pool_backward", &[n, c], grad_out.shape()));
    }
    let inv = T::one() / T::from_usize_lossy(h * w);
    let mut dx = probe.into_data();
    for (plane, &g) in dx.chunks_mut(h * w).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Tensor::new(input_shape, dx)
}
