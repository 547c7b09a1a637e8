//! One forward/backward pass of the full model: injection, equilibrium, heads, loss.

use crate::autodiff::{Eval, Graph, Tape, TapeKind, Var};
use crate::cell::{input_transform, Activation, DropoutMask, MdeqParams, ModelConfig, Net};
use crate::error::{Error, Result};
use crate::implicit::{
    backward_equilibrium, forward_equilibrium, unrolled_backward, unrolled_forward, CellGrads, CellMap,
};
use crate::scalar::Scalar;
use crate::solver::{SolverConfig, SolverTrace};
use crate::state::MultiscaleState;
use crate::tensor::Tensor;

use super::heads::{classification_logits, segmentation_logits};

/// Supervision for a batch. Dense labels are `[N][H][W]`-ordered class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub classes: Option<Vec<usize>>,
    pub dense: Option<Vec<usize>>,
}

/// How the equilibrium state is obtained and differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Implicit {
        forward: SolverConfig,
        backward: SolverConfig,
    },
    Unrolled {
        depth: usize,
    },
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Sum of the enabled head losses, each a mean over its positions.
    pub loss: f64,
    pub class_loss: Option<f64>,
    pub dense_loss: Option<f64>,
    /// Gradient of `loss` for every parameter, zero where unused.
    pub grads: MdeqParams<T>,
    pub fwd_evals: usize,
    pub bwd_evals: usize,
    /// Peak full-length vectors held by either solver.
    pub solver_vectors: usize,
    pub forward_trace: Option<SolverTrace>,
    pub backward_trace: Option<SolverTrace>,
    /// The equilibrium missed its tolerance by more than a factor of ten.
    pub stale: bool,
    /// Mask id seen by each `f_θ` application of the step.
    pub invocations: Vec<u64>,
    pub class_logits: Option<Tensor<T>>,
    pub dense_logits: Option<Tensor<T>>,
}

/// Head outputs for a batch.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub state: MultiscaleState<T>,
    pub class_logits: Option<Tensor<T>>,
    pub dense_logits: Option<Tensor<T>>,
    pub trace: SolverTrace,
}

fn check_targets(config: &ModelConfig, images: &Tensor<impl Scalar>, targets: &Targets) -> Result<()> {
    let (n, _, h, w) = images.dims4("step")?;
    if targets.classes.is_none() && targets.dense.is_none() {
        return Err(Error::invalid("step", "no targets supplied"));
    }
    if let Some(c) = &targets.classes {
        if config.num_classes == 0 || c.len() != n {
            return Err(Error::invalid("step", "class targets do not match the batch or head"));
        }
    }
    if let Some(d) = &targets.dense {
        if config.seg_classes == 0 || d.len() != n * h * w {
            return Err(Error::invalid("step", "dense targets do not match the batch or head"));
        }
    }
    Ok(())
}

struct HeadLoss<T, V> {
    total: V,
    class: Option<(f64, Tensor<T>)>,
    dense: Option<(f64, Tensor<T>)>,
}

/// Records both heads and their summed loss on `net`.
fn head_loss<T: Scalar, G: Graph<T>>(
    net: &mut Net<'_, T, G>,
    config: &ModelConfig,
    z: &[G::Value],
    targets: &Targets,
) -> Result<HeadLoss<T, G::Value>> {
    let mut total: Option<G::Value> = None;
    let mut class = None;
    let mut dense = None;
    if let Some(labels) = &targets.classes {
        let logits = classification_logits(net, config, z)?;
        let l = net.graph.cross_entropy(&logits, labels)?;
        let v = net.graph.value(&l).data()[0].to_f64_lossy();
        class = Some((v, net.graph.value(&logits).clone()));
        total = Some(l);
    }
    if let Some(labels) = &targets.dense {
        let logits = segmentation_logits(net, config, &z[0])?;
        let l = net.graph.cross_entropy(&logits, labels)?;
        let v = net.graph.value(&l).data()[0].to_f64_lossy();
        dense = Some((v, net.graph.value(&logits).clone()));
        total = Some(match total {
            Some(t) => net.graph.add(&t, &l)?,
            None => l,
        });
    }
    Ok(HeadLoss {
        total: total.expect("targets checked"),
        class,
        dense,
    })
}

fn add_named<T: Scalar>(acc: &mut MdeqParams<T>, name: &str, g: &Tensor<T>) -> Result<()> {
    acc.get_mut(name)
        .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?
        .add_assign(g)
}

/// Loss and parameter gradients for one batch.
pub fn forward_backward<T: Scalar>(
    params: &MdeqParams<T>,
    config: &ModelConfig,
    images: &Tensor<T>,
    targets: &Targets,
    mask: &DropoutMask<T>,
    act: Activation,
    mode: Mode,
) -> Result<StepOutput<T>> {
    check_targets(config, images, targets)?;
    let mut grads = params.zeros_like();

    let mut inj = Net::new(Tape::new(TapeKind::Aux), params);
    let img = inj.graph.leaf(images.clone());
    let x_var = input_transform(&mut inj, config, &img)?;
    let x_inj = inj.graph.get(x_var).clone();

    let mut map = CellMap::new(params, config, x_inj, mask, act)?;
    let (z_star, forward_trace, stale_eps, unrolled) = match mode {
        Mode::Implicit { forward, .. } => {
            let eq = forward_equilibrium(&mut map, &forward)?;
            (eq.z_star.clone(), Some(eq), forward.epsilon, None)
        }
        Mode::Unrolled { depth } => {
            let u = unrolled_forward(&mut map, depth)?;
            (u.z_out.clone(), None, 0.0, Some(u))
        }
    };

    let state = map.state(&z_star)?;
    let mut head = Net::new(Tape::new(TapeKind::Aux), params);
    let z_vars: Vec<Var> = state.into_scales().into_iter().map(|t| head.graph.leaf(t)).collect();
    let heads = head_loss(&mut head, config, &z_vars, targets)?;
    let loss_var = heads.total;
    let loss = head.graph.get(loss_var).data()[0].to_f64_lossy();
    let (head_tape, head_params) = head.into_parts();
    let mut wanted = z_vars.clone();
    wanted.extend(head_params.iter().map(|(_, v)| *v));
    let mut hg = head_tape.vjp(loss_var, Tensor::scalar(T::one()), &wanted)?;
    for (name, v) in &head_params {
        add_named(&mut grads, name, hg.get(*v).expect("requested variable"))?;
    }
    let dz = MultiscaleState::new(z_vars.iter().map(|&v| hg.take(v).expect("requested variable")).collect())?;
    let loss_grad = map.flatten(&dz)?;
    drop(head_tape);

    let mut solver_vectors = 0;
    let (cell_grads, bwd_evals, fwd_evals, backward_trace, stale): (CellGrads<T>, _, _, _, _) = match mode {
        Mode::Implicit { backward, .. } => {
            let eq = forward_trace.as_ref().expect("implicit mode");
            let adj = backward_equilibrium(&mut map, eq, &loss_grad, &backward, stale_eps)?;
            let evals = adj.trace.f_evals();
            solver_vectors = eq.stats.peak_stored_vectors.max(adj.stats.peak_stored_vectors);
            (adj.grads, evals, eq.trace.f_evals(), Some(adj.trace), adj.stale)
        }
        Mode::Unrolled { depth } => {
            let u = unrolled.expect("unrolled mode");
            (unrolled_backward(&u.steps, &loss_grad)?, depth, depth, None, false)
        }
    };
    for (name, g) in &cell_grads.params {
        add_named(&mut grads, name, g)?;
    }

    let (inj_tape, inj_params) = inj.into_parts();
    let wanted: Vec<Var> = inj_params.iter().map(|(_, v)| *v).collect();
    let ig = inj_tape.vjp(x_var, cell_grads.x, &wanted)?;
    for (name, v) in &inj_params {
        add_named(&mut grads, name, ig.get(*v).expect("requested variable"))?;
    }

    let (class_loss, class_logits) = heads.class.map_or((None, None), |(l, t)| (Some(l), Some(t)));
    let (dense_loss, dense_logits) = heads.dense.map_or((None, None), |(l, t)| (Some(l), Some(t)));
    Ok(StepOutput {
        loss,
        class_loss,
        dense_loss,
        grads,
        fwd_evals,
        bwd_evals,
        solver_vectors,
        forward_trace: forward_trace.map(|e| e.trace),
        backward_trace,
        stale,
        invocations: map.invocations().to_vec(),
        class_logits,
        dense_logits,
    })
}

/// Head outputs without recording anything; `mask` is normally the identity.
pub fn infer<T: Scalar>(
    params: &MdeqParams<T>,
    config: &ModelConfig,
    images: &Tensor<T>,
    mask: &DropoutMask<T>,
    act: Activation,
    forward: &SolverConfig,
) -> Result<Inference<T>> {
    let x_inj = crate::cell::inject(params, config, images)?;
    let mut map = CellMap::new(params, config, x_inj, mask, act)?;
    let eq = forward_equilibrium(&mut map, forward)?;
    let state = map.state(&eq.z_star)?;
    let mut net = Net::new(Eval, params);
    let zs: Vec<_> = state.scales().iter().map(|t| net.graph.constant(t.clone())).collect();
    let class_logits = if config.num_classes > 0 {
        Some((*classification_logits(&mut net, config, &zs)?).clone())
    } else {
        None
    };
    let dense_logits = if config.seg_classes > 0 {
        Some((*segmentation_logits(&mut net, config, &zs[0])?).clone())
    } else {
        None
    };
    Ok(Inference {
        state,
        class_logits,
        dense_logits,
        trace: eq.trace,
    })
}

/// Summed head loss at the equilibrium, without gradients.
pub fn loss_value<T: Scalar>(
    params: &MdeqParams<T>,
    config: &ModelConfig,
    images: &Tensor<T>,
    targets: &Targets,
    mask: &DropoutMask<T>,
    act: Activation,
    forward: &SolverConfig,
) -> Result<f64> {
    check_targets(config, images, targets)?;
    let inf = infer(params, config, images, mask, act, forward)?;
    let mut net = Net::new(Eval, params);
    let zs: Vec<_> = inf.state.into_scales().into_iter().map(|t| net.graph.constant(t)).collect();
    let heads = head_loss(&mut net, config, &zs, targets)?;
    Ok(heads.total.data()[0].to_f64_lossy())
}
