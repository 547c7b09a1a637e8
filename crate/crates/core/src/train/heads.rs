//! Prediction heads read off the equilibrium state.
//!
//! The classification head projects every scale with a 1×1 convolution,
//! carries the running sum down to the lowest resolution through stride-2
//! convolutions, then applies a 1×1 convolution, global average pooling and a
//! dense layer. The segmentation head is a 1×1 convolution on scale 1.

use crate::autodiff::Graph;
use crate::cell::{ModelConfig, Net, SpecBuilder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn head_specs(config: &ModelConfig, b: &mut SpecBuilder) {
    if config.num_classes > 0 {
        let n = config.n_scales();
        for i in 0..n {
            let h = config.head_channels[i];
            b.conv(&format!("head.cls.proj{}", i + 1), h, config.channels[i], 1, false);
            b.norm(&format!("head.cls.proj{}.gn", i + 1), h, 1.0);
        }
        for i in 1..n {
            let (from, to) = (config.head_channels[i - 1], config.head_channels[i]);
            b.conv(&format!("head.cls.down{i}"), to, from, 3, false);
            b.norm(&format!("head.cls.down{i}.gn"), to, 1.0);
        }
        let last = config.head_channels[n - 1];
        b.conv("head.cls.final", config.final_channels, last, 1, false);
        b.norm("head.cls.final.gn", config.final_channels, 1.0);
        b.dense("head.cls.fc", config.num_classes, config.final_channels);
    }
    if config.seg_classes > 0 {
        b.conv("head.seg.conv", config.seg_classes, config.channels[0], 1, true);
    }
}

/// Class logits `[N, num_classes]` from the per-scale equilibrium state.
pub fn classification_logits<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z: &[G::Value],
) -> Result<G::Value> {
    if config.num_classes == 0 {
        return Err(Error::invalid("classification_logits", "classification head is disabled"));
    }
    if z.len() != config.n_scales() {
        return Err(Error::invalid(
            "classification_logits",
            format!("expected {} scales, got {}", config.n_scales(), z.len()),
        ));
    }
    let groups = config.gn_groups;
    let mut y: Option<G::Value> = None;
    for (i, zi) in z.iter().enumerate() {
        let name = format!("head.cls.proj{}", i + 1);
        let p = net.conv(zi, &name, 1, 0)?;
        let p = net.norm(&p, &format!("{name}.gn"), groups)?;
        let p = net.graph.relu(&p)?;
        y = Some(match y {
            None => p,
            Some(prev) => {
                let d = net.conv(&prev, &format!("head.cls.down{i}"), 2, 1)?;
                let d = net.norm(&d, &format!("head.cls.down{i}.gn"), groups)?;
                let d = net.graph.relu(&d)?;
                net.graph.add(&d, &p)?
            }
        });
    }
    let y = y.expect("at least two scales");
    let y = net.conv(&y, "head.cls.final", 1, 0)?;
    let y = net.norm(&y, "head.cls.final.gn", groups)?;
    let y = net.graph.relu(&y)?;
    let pooled = net.graph.avg_pool(&y)?;
    net.dense(&pooled, "head.cls.fc")
}

/// Per-pixel logits `[N, seg_classes, H, W]` from the scale-1 equilibrium
/// state, upsampled to the input resolution when the injection downsampled.
pub fn segmentation_logits<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z1: &G::Value,
) -> Result<G::Value> {
    if config.seg_classes == 0 {
        return Err(Error::invalid("segmentation_logits", "segmentation head is disabled"));
    }
    let y = net.conv(z1, "head.seg.conv", 1, 0)?;
    if config.num_downsamples > 0 {
        net.graph.upsample(&y, 1 << config.num_downsamples)
    } else {
        Ok(y)
    }
}
