use crate::error::{Error, Result};

/// Architecture of the equilibrium cell, its input transform and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channels per scale, highest resolution first. Its length is the number of scales.
    pub channels: Vec<usize>,
    /// Width multiplier between the two convolutions of a residual block.
    pub expansion: usize,
    pub gn_groups: usize,
    pub dropout_rate: f64,
    /// Stride-2 stages in the input transform before the equilibrium layer.
    pub num_downsamples: usize,
    pub softplus_beta: f64,
    pub input_channels: usize,
    /// Classification classes; 0 disables the classification head.
    pub num_classes: usize,
    /// Per-scale channels of the classification head projections.
    pub head_channels: Vec<usize>,
    /// Channels of the last 1×1 convolution before pooling.
    pub final_channels: usize,
    /// Dense-labeling classes; 0 disables the segmentation head.
    pub seg_classes: usize,
    /// Standard deviation of initial convolution and dense weights.
    pub init_std: f64,
    /// Initial affine scale of the group norm closing each fusion output.
    pub fusion_gamma: f64,
}

impl ModelConfig {
    /// The small CIFAR-10 model: 3 scales of [8,16,32] channels, 5× expansion, GroupNorm(4).
    pub fn cifar_small() -> Self {
        Self {
            channels: vec![8, 16, 32],
            expansion: 5,
            gn_groups: 4,
            dropout_rate: 0.2,
            num_downsamples: 0,
            softplus_beta: 5.0,
            input_channels: 3,
            num_classes: 10,
            head_channels: vec![16, 32, 64],
            final_channels: 200,
            seg_classes: 0,
            init_std: 0.01,
            fusion_gamma: 1.0,
        }
    }

    /// Two scales of [4,8] channels, for gradient verification on tiny inputs.
    pub fn tiny() -> Self {
        Self {
            channels: vec![4, 8],
            expansion: 2,
            gn_groups: 2,
            dropout_rate: 0.0,
            num_downsamples: 0,
            softplus_beta: 5.0,
            input_channels: 3,
            num_classes: 4,
            head_channels: vec![4, 8],
            final_channels: 8,
            seg_classes: 0,
            init_std: 0.01,
            fusion_gamma: 1.0,
        }
    }

    pub fn n_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels.len() < 2 {
            return fail(format!("need at least 2 scales, got {}", self.channels.len()));
        }
        if self.expansion == 0 || self.input_channels == 0 {
            return fail("expansion and input_channels must be positive".into());
        }
        if self.gn_groups == 0 {
            return fail("gn_groups must be positive".into());
        }
        let mut widths: Vec<usize> = self.channels.clone();
        widths.extend(self.channels.iter().map(|c| c * self.expansion));
        if self.num_classes > 0 {
            if self.head_channels.len() != self.channels.len() {
                return fail(format!(
                    "head_channels has {} entries for {} scales",
                    self.head_channels.len(),
                    self.channels.len()
                ));
            }
            widths.extend(&self.head_channels);
            widths.push(self.final_channels);
        }
        if let Some(w) = widths.iter().find(|&&w| w == 0 || w % self.gn_groups != 0) {
            return fail(format!("width {w} is not divisible into {} groups", self.gn_groups));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        if self.num_downsamples > 2 {
            return fail(format!("num_downsamples must be 0, 1 or 2, got {}", self.num_downsamples));
        }
        if !(self.softplus_beta > 0.0) {
            return fail("softplus_beta must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        if self.num_classes == 0 && self.seg_classes == 0 {
            return fail("at least one head must be enabled".into());
        }
        Ok(())
    }

    /// Per-scale `(C, H, W)` of the equilibrium state for an input of `height×width` pixels.
    pub fn state_shapes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize, usize)>> {
        let div = 1usize << (self.num_downsamples + self.n_scales() - 1);
        if !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {height}×{width} is not divisible by {div} ({} downsamplings, {} scales)",
                self.num_downsamples,
                self.n_scales()
            )));
        }
        let (h0, w0) = (height >> self.num_downsamples, width >> self.num_downsamples);
        Ok(self
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, h0 >> i, w0 >> i))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::cifar_small().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn state_shapes_halve() {
        let cfg = ModelConfig::cifar_small();
        assert_eq!(cfg.state_shapes(32, 32).unwrap(), vec![(8, 32, 32), (16, 16, 16), (32, 8, 8)]);
        assert!(cfg.state_shapes(30, 32).is_err());
    }

    #[test]
    fn rejects_indivisible_groups() {
        let mut cfg = ModelConfig::cifar_small();
        cfg.gn_groups = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::cifar_small();
        cfg.channels = vec![8];
        assert!(cfg.validate().is_err());
    }
}
