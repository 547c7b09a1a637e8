use std::rc::Rc;

use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builder interface over the differentiable primitives.
pub trait Graph<T: Scalar> {
    type Value: Clone;

    /// Introduces a tensor that is not differentiated through.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        input: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;

    fn group_norm(
        &mut self,
        input: &Self::Value,
        groups: usize,
        gamma: &Self::Value,
        beta: &Self::Value,
    ) -> Result<Self::Value>;

    fn relu(&mut self, input: &Self::Value) -> Result<Self::Value>;

    fn softplus(&mut self, input: &Self::Value, beta: f64) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, input: &Self::Value, factor: f64) -> Result<Self::Value>;

    /// Multiplies each `[H,W]` plane by a fixed per-(sample, channel) factor.
    fn channel_mask(&mut self, input: &Self::Value, mask: &Tensor<T>) -> Result<Self::Value>;

    fn upsample(&mut self, input: &Self::Value, factor: usize) -> Result<Self::Value>;

    fn avg_pool(&mut self, input: &Self::Value) -> Result<Self::Value>;

    fn dense(
        &mut self,
        input: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value>;

    fn weight_norm(&mut self, direction: &Self::Value, gain: &Self::Value) -> Result<Self::Value>;

    /// Mean softmax cross-entropy; the result has shape `[1]`.
    fn cross_entropy(&mut self, logits: &Self::Value, labels: &[usize]) -> Result<Self::Value>;
}

/// Forward-only evaluation: intermediates are dropped as soon as callers drop them.
#[derive(Debug, Default)]
pub struct Eval;

impl<T: Scalar> Graph<T> for Eval {
    type Value = Rc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        input: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value> {
        ops::conv2d(input, kernel, bias.map(|b| &**b), stride, padding).map(Rc::new)
    }

    fn group_norm(
        &mut self,
        input: &Self::Value,
        groups: usize,
        gamma: &Self::Value,
        beta: &Self::Value,
    ) -> Result<Self::Value> {
        let (y, _) = ops::group_norm(input, groups, gamma, beta, ops::GROUP_NORM_EPS)?;
        Ok(Rc::new(y))
    }

    fn relu(&mut self, input: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(ops::relu(input)))
    }

    fn softplus(&mut self, input: &Self::Value, beta: f64) -> Result<Self::Value> {
        ops::softplus(input, beta).map(Rc::new)
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.add(b).map(Rc::new)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.mul(b).map(Rc::new)
    }

    fn scale(&mut self, input: &Self::Value, factor: f64) -> Result<Self::Value> {
        Ok(Rc::new(input.scale(T::from_f64_lossy(factor))))
    }

    fn channel_mask(&mut self, input: &Self::Value, mask: &Tensor<T>) -> Result<Self::Value> {
        ops::elementwise::channel_mask(input, mask).map(Rc::new)
    }

    fn upsample(&mut self, input: &Self::Value, factor: usize) -> Result<Self::Value> {
        ops::bilinear_upsample(input, factor).map(Rc::new)
    }

    fn avg_pool(&mut self, input: &Self::Value) -> Result<Self::Value> {
        ops::global_avg_pool(input).map(Rc::new)
    }

    fn dense(
        &mut self,
        input: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value> {
        ops::dense(input, weight, bias.map(|b| &**b)).map(Rc::new)
    }

    fn weight_norm(&mut self, direction: &Self::Value, gain: &Self::Value) -> Result<Self::Value> {
        let (w, _) = ops::weight_norm(direction, gain)?;
        Ok(Rc::new(w))
    }

    fn cross_entropy(&mut self, logits: &Self::Value, labels: &[usize]) -> Result<Self::Value> {
        let (loss, _) = ops::softmax_cross_entropy(logits, labels)?;
        Ok(Rc::new(Tensor::scalar(loss)))
    }
}
