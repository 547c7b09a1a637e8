//! Named, enumerable model parameters.
//!
//! Every convolution kernel is weight-normalized: it is stored as a
//! direction tensor `<name>.v` and a per-output-channel gain `<name>.g`,
//! with an optional bias `<name>.b`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{block, fusion, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvDirection,
    ConvGain,
    Bias,
    NormGamma,
    NormBeta,
    DenseWeight,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvDirection
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Initial value for gamma parameters.
    pub fill: f64,
}

/// Collects parameter specs in a fixed order.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fill: f64) {
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            fill,
        });
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
        self.push(format!("{name}.v"), vec![c_out, c_in, k, k], ParamKind::ConvDirection, 0.0);
        self.push(format!("{name}.g"), vec![c_out], ParamKind::ConvGain, 0.0);
        if bias {
            self.push(format!("{name}.b"), vec![c_out], ParamKind::Bias, 0.0);
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, gamma: f64) {
        self.push(format!("{name}.gamma"), vec![channels], ParamKind::NormGamma, gamma);
        self.push(format!("{name}.beta"), vec![channels], ParamKind::NormBeta, 0.0);
    }

    pub fn dense(&mut self, name: &str, out: usize, inp: usize) {
        self.push(format!("{name}.w"), vec![out, inp], ParamKind::DenseWeight, 0.0);
        self.push(format!("{name}.b"), vec![out], ParamKind::Bias, 0.0);
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Parameter specs of the whole model, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut b = SpecBuilder::default();
    block::injection_specs(config, &mut b);
    block::residual_specs(config, &mut b);
    fusion::fusion_specs(config, &mut b);
    crate::train::heads::head_specs(config, &mut b);
    Ok(b.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// All learnable tensors of the cell, input transform and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MdeqParams<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> MdeqParams<T> {
    pub fn from_entries(entries: Vec<Param<T>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, p) in entries.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.index.get(name).map(|&i| self.entries[i].kind)
    }

    pub fn cast<U: Scalar>(&self) -> MdeqParams<U> {
        MdeqParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zero tensors shaped like every parameter, in the same order.
    pub fn zeros_like(&self) -> MdeqParams<T> {
        MdeqParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Draws initial parameters: weights i.i.d. normal with standard deviation
/// `config.init_std`, gains equal to the initial direction norms, norm affines
/// at identity and biases at zero. Deterministic per seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<MdeqParams<T>> {
    let specs = param_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
    let mut entries: Vec<Param<T>> = Vec::with_capacity(specs.len());
    for spec in specs {
        let value = match spec.kind {
            ParamKind::ConvDirection | ParamKind::DenseWeight => Tensor::from_fn(&spec.shape, |_| {
                T::from_f64_lossy(normal.sample(&mut rng))
            }),
            ParamKind::ConvGain => {
                let direction = &entries
                    .last()
                    .filter(|p| p.kind == ParamKind::ConvDirection)
                    .ok_or_else(|| Error::Config(format!("gain {} without direction", spec.name)))?
                    .value;
                let per = direction.len() / spec.shape[0];
                let norms = direction
                    .data()
                    .chunks(per)
                    .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
                    .collect();
                Tensor::new(&spec.shape, norms)?
            }
            ParamKind::NormGamma => Tensor::full(&spec.shape, T::from_f64_lossy(spec.fill)),
            ParamKind::Bias | ParamKind::NormBeta => Tensor::zeros(&spec.shape),
        };
        entries.push(Param {
            name: spec.name,
            kind: spec.kind,
            value,
        });
    }
    MdeqParams::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        let c = init_params::<f32>(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gains_reproduce_initial_kernels() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let v = p.require("block1.conv1.v").unwrap();
        let g = p.require("block1.conv1.g").unwrap();
        let (w, _) = crate::ops::weight_norm(v, g).unwrap();
        assert!(w.max_abs_diff(v).unwrap() < 1e-15);
    }

    #[test]
    fn names_are_unique_and_enumerable() {
        let p = init_params::<f32>(&ModelConfig::cifar_small(), 0).unwrap();
        let mut names: Vec<_> = p.iter().map(|e| e.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(p.iter().all(|e| p.get(&e.name).is_some()));
    }
}
