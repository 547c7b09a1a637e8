use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Above this value of `beta·z`, softplus is evaluated as its linear asymptote `z`.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 20.0;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, "relu_backward", |x, g| if x > T::zero() { g } else { T::zero() })
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("softplus", format!("beta must be positive, got {beta}")))
    }
}

#[inline]
fn softplus_scalar<T: Scalar>(z: T, beta: T, threshold: T) -> T {
    let bz = beta * z;
    if bz > threshold {
        z
    } else {
        bz.exp().ln_1p() / beta
    }
}

/// Derivative of softplus: the logistic function of `beta·z`.
#[inline]
pub fn softplus_slope<T: Scalar>(z: T, beta: T) -> T {
    let bz = beta * z;
    if bz > T::from_f64_lossy(SOFTPLUS_LINEAR_THRESHOLD) {
        T::one()
    } else {
        T::one() / (T::one() + (-bz).exp())
    }
}

/// `(1/beta)·log(1 + exp(beta·z))`, overflow-safe for large `beta·z`.
pub fn softplus<T: Scalar>(input: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    check_beta(beta)?;
    let b = T::from_f64_lossy(beta);
    let th = T::from_f64_lossy(SOFTPLUS_LINEAR_THRESHOLD);
    Ok(input.map(|z| softplus_scalar(z, b, th)))
}

pub fn softplus_backward<T: Scalar>(
    input: &Tensor<T>,
    beta: f64,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_beta(beta)?;
    let b = T::from_f64_lossy(beta);
    input.zip_map(grad_out, "softplus_backward", |z, g| g * softplus_slope(z, b))
}
