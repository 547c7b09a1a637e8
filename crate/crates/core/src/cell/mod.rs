//! The multiscale equilibrium transformation `f_θ`.
//!
//! One application runs a residual block at every scale (the input injection
//! enters only at scale 1), applies the step's dropout mask to the block
//! outputs and mixes all scales through the fusion layer.

mod block;
mod config;
mod dropout;
mod fusion;
mod net;
mod params;
pub mod spectral;

pub use block::{input_transform, residual_block};
pub use config::ModelConfig;
pub use dropout::DropoutMask;
pub use fusion::fuse;
pub use net::Net;
pub use params::{init_params, param_specs, MdeqParams, Param, ParamKind, ParamSpec, SpecBuilder};

use crate::autodiff::{Eval, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::MultiscaleState;
use crate::tensor::Tensor;

/// Closing activation of each residual block and fusion output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

/// One application of `f_θ` on graph values, one per scale.
pub fn f_theta<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z: &[G::Value],
    x_inj: &G::Value,
    mask: &DropoutMask<T>,
    act: Activation,
) -> Result<Vec<G::Value>> {
    let n = config.n_scales();
    if z.len() != n {
        return Err(Error::invalid("f_theta", format!("expected {n} scales, got {}", z.len())));
    }
    let mut blocks = Vec::with_capacity(n);
    for (i, zi) in z.iter().enumerate() {
        let inj = (i == 0).then_some(x_inj);
        let mut out = residual_block(net, config, zi, inj, i + 1, act)?;
        if let Some(m) = mask.scale(i) {
            out = net.graph.channel_mask(&out, m)?;
        }
        blocks.push(out);
    }
    fuse(net, config, &blocks, act)
}

/// Applies `f_θ` to a concrete state without recording anything.
pub fn apply_cell<T: Scalar>(
    params: &MdeqParams<T>,
    config: &ModelConfig,
    z: &MultiscaleState<T>,
    x_inj: &Tensor<T>,
    mask: &DropoutMask<T>,
    act: Activation,
) -> Result<MultiscaleState<T>> {
    let mut net = Net::new(Eval, params);
    let zs: Vec<_> = z.scales().iter().map(|t| net.graph.constant(t.clone())).collect();
    let x = net.graph.constant(x_inj.clone());
    let out = f_theta(&mut net, config, &zs, &x, mask, act)?;
    MultiscaleState::new(out.into_iter().map(unwrap_rc).collect())
}

/// Computes the scale-1 injection for an image batch.
pub fn inject<T: Scalar>(
    params: &MdeqParams<T>,
    config: &ModelConfig,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut net = Net::new(Eval, params);
    let x = net.graph.constant(images.clone());
    Ok(unwrap_rc(input_transform(&mut net, config, &x)?))
}

pub(crate) fn unwrap_rc<T: Clone>(v: std::rc::Rc<T>) -> T {
    std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_small_parameter_count() {
        let p = init_params::<f32>(&ModelConfig::cifar_small(), 0).unwrap();
        let n = p.count();
        eprintln!("params {n}");
        assert!((n as f64 - 170_000.0).abs() <= 0.15 * 170_000.0, "{n}");
    }
}
