use crate::autodiff::{Eval, Graph, Tape, TapeKind, Var};
use crate::cell::{f_theta, unwrap_rc, Activation, DropoutMask, MdeqParams, ModelConfig, Net};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{MultiscaleState, ScaleShapes};
use crate::tensor::Tensor;

use super::{Accumulate, ImplicitMap, Linearization};

/// `f_θ(·; x)` for a fixed injection, parameter set, dropout mask and activation.
pub struct CellMap<'a, T: Scalar> {
    params: &'a MdeqParams<T>,
    config: &'a ModelConfig,
    x_inj: Tensor<T>,
    mask: &'a DropoutMask<T>,
    act: Activation,
    batch: usize,
    shapes: ScaleShapes,
    invocations: Vec<u64>,
}

impl<'a, T: Scalar> CellMap<'a, T> {
    pub fn new(
        params: &'a MdeqParams<T>,
        config: &'a ModelConfig,
        x_inj: Tensor<T>,
        mask: &'a DropoutMask<T>,
        act: Activation,
    ) -> Result<Self> {
        let (batch, c, h, w) = x_inj.dims4("CellMap")?;
        if c != config.channels[0] {
            return Err(Error::invalid(
                "CellMap",
                format!("injection has {c} channels, scale 1 has {}", config.channels[0]),
            ));
        }
        let div = 1 << (config.n_scales() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid("CellMap", format!("{h}×{w} is not divisible by {div}")));
        }
        for i in 0..config.n_scales() {
            if let Some(m) = mask.scale(i) {
                if m.shape() != [batch, config.channels[i]] {
                    return Err(Error::shape("CellMap mask", &[batch, config.channels[i]], m.shape()));
                }
            }
        }
        let shapes = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &ci)| (ci, h >> i, w >> i))
            .collect();
        Ok(Self {
            params,
            config,
            x_inj,
            mask,
            act,
            batch,
            shapes,
            invocations: Vec::new(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn shapes(&self) -> &ScaleShapes {
        &self.shapes
    }

    pub fn injection(&self) -> &Tensor<T> {
        &self.x_inj
    }

    /// Mask id consumed by every `f_θ` application so far, in order.
    pub fn invocations(&self) -> &[u64] {
        &self.invocations
    }

    pub fn state(&self, flat: &[T]) -> Result<MultiscaleState<T>> {
        MultiscaleState::unflatten(flat, self.batch, &self.shapes)
    }

    pub fn flatten(&self, state: &MultiscaleState<T>) -> Result<Vec<T>> {
        if state.batch() != self.batch || state.scale_shapes() != self.shapes {
            return Err(Error::invalid("CellMap", "state geometry does not match the map"));
        }
        Ok(state.flatten())
    }
}

impl<T: Scalar> ImplicitMap<T> for CellMap<'_, T> {
    type Lin = CellLinearization<T>;

    fn dim(&self) -> usize {
        let per: usize = self.shapes.iter().map(|&(c, h, w)| c * h * w).sum();
        per * self.batch
    }

    fn blocks(&self) -> usize {
        self.batch
    }

    fn eval(&mut self, z: &[T]) -> Result<Vec<T>> {
        self.invocations.push(self.mask.id());
        let state = self.state(z)?;
        let mut net = Net::new(Eval, self.params);
        let zs: Vec<_> = state.into_scales().into_iter().map(|t| net.graph.constant(t)).collect();
        let x = net.graph.constant(self.x_inj.clone());
        let out = f_theta(&mut net, self.config, &zs, &x, self.mask, self.act)?;
        Ok(MultiscaleState::new(out.into_iter().map(unwrap_rc).collect())?.flatten())
    }

    fn linearize(&mut self, z: &[T]) -> Result<CellLinearization<T>> {
        self.invocations.push(self.mask.id());
        let state = self.state(z)?;
        let mut net = Net::new(Tape::new(TapeKind::Cell), self.params);
        let z_vars: Vec<Var> = state.into_scales().into_iter().map(|t| net.graph.leaf(t)).collect();
        let x_var = net.graph.leaf(self.x_inj.clone());
        let outs = f_theta(&mut net, self.config, &z_vars, &x_var, self.mask, self.act)?;
        let (tape, params) = net.into_parts();
        let output = MultiscaleState::new(outs.iter().map(|&v| tape.get(v).clone()).collect())?.flatten();
        Ok(CellLinearization {
            tape,
            z_vars,
            x_var,
            params,
            outs,
            output,
            batch: self.batch,
            shapes: self.shapes.clone(),
        })
    }
}

/// One recorded application of `f_θ`.
pub struct CellLinearization<T> {
    tape: Tape<T>,
    z_vars: Vec<Var>,
    x_var: Var,
    params: Vec<(String, Var)>,
    outs: Vec<Var>,
    output: Vec<T>,
    batch: usize,
    shapes: ScaleShapes,
}

impl<T: Scalar> CellLinearization<T> {
    fn seeds(&self, cotangent: &[T]) -> Result<Vec<(Var, Tensor<T>)>> {
        let c = MultiscaleState::unflatten(cotangent, self.batch, &self.shapes)?;
        Ok(self.outs.iter().copied().zip(c.into_scales()).collect())
    }

    fn gather_state(&self, grads: &mut crate::autodiff::Gradients<T>) -> Result<Vec<T>> {
        let scales = self
            .z_vars
            .iter()
            .map(|&v| grads.take(v).expect("requested variable"))
            .collect();
        Ok(MultiscaleState::new(scales)?.flatten())
    }
}

impl<T: Scalar> Linearization<T> for CellLinearization<T> {
    type Grads = CellGrads<T>;

    fn output(&self) -> &[T] {
        &self.output
    }

    fn vjp_state(&self, cotangent: &[T]) -> Result<Vec<T>> {
        let mut g = self.tape.vjp_many(self.seeds(cotangent)?, &self.z_vars)?;
        self.gather_state(&mut g)
    }

    fn vjp(&self, cotangent: &[T]) -> Result<(Vec<T>, CellGrads<T>)> {
        let mut wanted = self.z_vars.clone();
        wanted.push(self.x_var);
        wanted.extend(self.params.iter().map(|(_, v)| *v));
        let mut g = self.tape.vjp_many(self.seeds(cotangent)?, &wanted)?;
        let state = self.gather_state(&mut g)?;
        let x = g.take(self.x_var).expect("requested variable");
        let params = self
            .params
            .iter()
            .map(|(name, v)| (name.clone(), g.take(*v).expect("requested variable")))
            .collect();
        Ok((state, CellGrads { params, x }))
    }
}

/// Gradients with respect to the cell parameters (in binding order) and the injection.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrads<T> {
    pub params: Vec<(String, Tensor<T>)>,
    pub x: Tensor<T>,
}

impl<T: Scalar> CellGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl<T: Scalar> Accumulate for CellGrads<T> {
    fn accumulate(&mut self, other: Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid("CellGrads", "parameter sets differ"));
        }
        for ((na, a), (nb, b)) in self.params.iter_mut().zip(other.params) {
            if *na != nb {
                return Err(Error::invalid("CellGrads", format!("parameter {na} vs {nb}")));
            }
            a.add_assign(&b)?;
        }
        self.x.add_assign(&other.x)
    }
}
