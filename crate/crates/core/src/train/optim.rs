//! First-order optimizers with decoupled weight decay.

use crate::cell::MdeqParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{OptimizerKind, TrainConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: SGD keeps one momentum buffer per parameter, Adam keeps
/// first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub step: u64,
    pub first: MdeqParams<T>,
    pub second: Option<MdeqParams<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &MdeqParams<T>, cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: params.zeros_like(),
            second: (cfg.optimizer == OptimizerKind::Adam).then(|| params.zeros_like()),
        }
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// Weight decay is decoupled (`p ← p − lr·λ·p`) and touches only
    /// convolution direction tensors.
    pub fn update(&mut self, params: &mut MdeqParams<T>, grads: &MdeqParams<T>, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::invalid(
                "Optimizer::update",
                format!(
                    "{} parameters, {} gradients, {} state entries",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        let mut second = self.second.as_mut().map(|s| s.iter_mut());
        for ((p, g), m) in params.iter_mut().zip(grads.iter()).zip(self.first.iter_mut()) {
            if p.name != g.name || p.value.shape() != g.value.shape() {
                return Err(Error::shape("Optimizer::update", p.value.shape(), g.value.shape()));
            }
            let v = second.as_mut().and_then(|it| it.next());
            let decay = if p.kind.decays() { lr * self.weight_decay } else { 0.0 };
            let pd = p.value.data_mut();
            let gd = g.value.data();
            let md = m.value.data_mut();
            match (self.kind, v) {
                (OptimizerKind::Sgd, _) => {
                    let mu = self.momentum;
                    for i in 0..pd.len() {
                        let (pi, gi) = (pd[i].to_f64_lossy(), gd[i].to_f64_lossy());
                        let buf = mu * md[i].to_f64_lossy() + gi;
                        md[i] = T::from_f64_lossy(buf);
                        let step = if self.nesterov { gi + mu * buf } else { buf };
                        pd[i] = T::from_f64_lossy(pi - decay * pi - lr * step);
                    }
                }
                (OptimizerKind::Adam, Some(v)) => {
                    let vd = v.value.data_mut();
                    for i in 0..pd.len() {
                        let (pi, gi) = (pd[i].to_f64_lossy(), gd[i].to_f64_lossy());
                        let m1 = BETA1 * md[i].to_f64_lossy() + (1.0 - BETA1) * gi;
                        let m2 = BETA2 * vd[i].to_f64_lossy() + (1.0 - BETA2) * gi * gi;
                        md[i] = T::from_f64_lossy(m1);
                        vd[i] = T::from_f64_lossy(m2);
                        let step = (m1 / bias1) / ((m2 / bias2).sqrt() + ADAM_EPS);
                        pd[i] = T::from_f64_lossy(pi - decay * pi - lr * step);
                    }
                }
                (OptimizerKind::Adam, None) => {
                    return Err(Error::invalid("Optimizer::update", "Adam state is missing second moments"));
                }
            }
        }
        Ok(())
    }
}
