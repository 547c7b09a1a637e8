//! Per-scale residual block and the input-injection transform.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::SpecBuilder;
use super::{Activation, ModelConfig, Net};

pub(crate) fn residual_specs(config: &ModelConfig, b: &mut SpecBuilder) {
    for (i, &c) in config.channels.iter().enumerate() {
        let p = format!("block{}", i + 1);
        let wide = c * config.expansion;
        b.conv(&format!("{p}.conv1"), wide, c, 3, false);
        b.norm(&format!("{p}.gn1"), wide, 1.0);
        b.conv(&format!("{p}.conv2"), c, wide, 3, false);
        b.norm(&format!("{p}.gn2"), c, 1.0);
        b.norm(&format!("{p}.gn3"), c, 1.0);
    }
}

pub(crate) fn injection_specs(config: &ModelConfig, b: &mut SpecBuilder) {
    let c1 = config.channels[0];
    let mut c_in = config.input_channels;
    for k in 0..config.num_downsamples {
        b.conv(&format!("inject.down{k}.conv"), c1, c_in, 3, false);
        b.norm(&format!("inject.down{k}.gn"), c1, 1.0);
        c_in = c1;
    }
    b.conv("inject.conv", c1, c_in, 3, true);
    b.norm("inject.gn", c1, 1.0);
}

/// Residual block at scale `scale` (1-based):
///
/// ```text
/// z̃  = GN(Conv(z))
/// ẑ  = GN(Conv(ReLU(z̃)) + [scale = 1]·x)
/// z⁺ = GN(act(ẑ + z))
/// ```
///
/// `act` is the block's closing activation (ReLU, or softplus in the smooth phase).
pub fn residual_block<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z: &G::Value,
    x_inj: Option<&G::Value>,
    scale: usize,
    act: Activation,
) -> Result<G::Value> {
    if scale == 0 || scale > config.n_scales() {
        return Err(Error::invalid("residual_block", format!("scale {scale} out of range")));
    }
    if x_inj.is_some() != (scale == 1) {
        return Err(Error::invalid(
            "residual_block",
            "input injection is supplied exactly at scale 1",
        ));
    }
    let p = format!("block{scale}");
    let groups = config.gn_groups;
    let t = net.conv(z, &format!("{p}.conv1"), 1, 1)?;
    let t = net.norm(&t, &format!("{p}.gn1"), groups)?;
    let t = net.graph.relu(&t)?;
    let mut t = net.conv(&t, &format!("{p}.conv2"), 1, 1)?;
    if let Some(x) = x_inj {
        t = net.graph.add(&t, x)?;
    }
    let z_hat = net.norm(&t, &format!("{p}.gn2"), groups)?;
    let t = net.graph.add(&z_hat, z)?;
    let t = net.activate(&t, act)?;
    net.norm(&t, &format!("{p}.gn3"), groups)
}

/// Maps an image batch to the scale-1 injection: `num_downsamples` stride-2
/// conv+GN+ReLU stages, then a 3×3 conv to `C₁` channels with GN and ReLU.
pub fn input_transform<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    image: &G::Value,
) -> Result<G::Value> {
    let (_, c, h, w) = net.graph.value(image).dims4("input_transform")?;
    if c != config.input_channels {
        return Err(Error::invalid(
            "input_transform",
            format!("expected {} input channels, got {c}", config.input_channels),
        ));
    }
    let div = 1 << config.num_downsamples;
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(
            "input_transform",
            format!("{h}×{w} input is not divisible by {div}"),
        ));
    }
    let groups = config.gn_groups;
    let mut t = image.clone();
    for k in 0..config.num_downsamples {
        t = net.conv(&t, &format!("inject.down{k}.conv"), 2, 1)?;
        t = net.norm(&t, &format!("inject.down{k}.gn"), groups)?;
        t = net.graph.relu(&t)?;
    }
    let t = net.conv(&t, "inject.conv", 1, 1)?;
    let t = net.norm(&t, "inject.gn", groups)?;
    net.graph.relu(&t)
}
