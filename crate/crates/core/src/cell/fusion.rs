//! All-pairs multi-resolution fusion.
//!
//! Output scale `j` is `act(GN(Σᵢ T_{i→j}(z⁺ᵢ)))` with
//! - `T_{j→j}` the identity,
//! - `T_{i→j}`, `i < j`: `j−i` stride-2 3×3 convolutions, each followed by GN,
//!   with ReLU between links; intermediate links keep `Cᵢ` channels and the
//!   last one maps to `Cⱼ`,
//! - `T_{i→j}`, `i > j`: a 1×1 convolution to `Cⱼ` channels and GN, then
//!   bilinear upsampling by `2^{i−j}`.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::SpecBuilder;
use super::{Activation, ModelConfig, Net};

pub(crate) fn fusion_specs(config: &ModelConfig, b: &mut SpecBuilder) {
    let n = config.n_scales();
    for j in 1..=n {
        let cj = config.channels[j - 1];
        for i in 1..=n {
            let ci = config.channels[i - 1];
            let p = format!("fuse.{i}to{j}");
            if i < j {
                for step in 0..j - i {
                    let out = if step == j - i - 1 { cj } else { ci };
                    b.conv(&format!("{p}.down{step}"), out, ci, 3, false);
                    b.norm(&format!("{p}.down{step}.gn"), out, 1.0);
                }
            } else if i > j {
                b.conv(&format!("{p}.align"), cj, ci, 1, false);
                b.norm(&format!("{p}.align.gn"), cj, 1.0);
            }
        }
        b.norm(&format!("fuse.post{j}"), cj, config.fusion_gamma);
    }
}

fn transfer<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z: &G::Value,
    i: usize,
    j: usize,
) -> Result<G::Value> {
    let p = format!("fuse.{i}to{j}");
    let groups = config.gn_groups;
    if i < j {
        let mut t = z.clone();
        for step in 0..j - i {
            t = net.conv(&t, &format!("{p}.down{step}"), 2, 1)?;
            t = net.norm(&t, &format!("{p}.down{step}.gn"), groups)?;
            if step + 1 < j - i {
                t = net.graph.relu(&t)?;
            }
        }
        Ok(t)
    } else {
        let t = net.conv(z, &format!("{p}.align"), 1, 0)?;
        let t = net.norm(&t, &format!("{p}.align.gn"), groups)?;
        net.graph.upsample(&t, 1 << (i - j))
    }
}

/// Mixes per-scale block outputs across resolutions; output shapes equal input shapes.
pub fn fuse<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    blocks: &[G::Value],
    act: Activation,
) -> Result<Vec<G::Value>> {
    let n = config.n_scales();
    if blocks.len() != n {
        return Err(Error::invalid("fuse", format!("expected {n} scales, got {}", blocks.len())));
    }
    let mut out = Vec::with_capacity(n);
    for j in 1..=n {
        let mut acc = blocks[j - 1].clone();
        for i in (1..=n).filter(|&i| i != j) {
            let t = transfer(net, config, &blocks[i - 1], i, j)?;
            acc = net.graph.add(&acc, &t)?;
        }
        let y = net.norm(&acc, &format!("fuse.post{j}"), config.gn_groups)?;
        out.push(net.activate(&y, act)?);
    }
    Ok(out)
}
