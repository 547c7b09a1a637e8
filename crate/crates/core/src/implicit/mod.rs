//! Equilibrium forward pass, implicit backward pass and the unrolled baseline.
//!
//! A layer is described by an [`ImplicitMap`] `z ↦ f(z)` over a flat state.
//! The forward pass solves `g(z) = f(z) − z = 0` with Broyden's method from
//! `z = 0` and keeps no tape. The backward pass records `f` once at `z*`,
//! solves the adjoint system `u = u·J_f + ∂ℓ/∂z*` with the same solver and
//! pulls `u` back to the inputs of `f`. The unrolled mode iterates `f` a fixed
//! number of times, keeping one tape per application, and backpropagates
//! through all of them.

mod cell_map;

pub use cell_map::{CellGrads, CellLinearization, CellMap};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::solver::{
    broyden_solve_with, norm, Iterate, Phase, SolveOptions, SolverConfig, SolverStats, SolverTrace,
    REL_RESIDUAL_FLOOR,
};

/// Gradients that can be summed across applications or batch shards.
pub trait Accumulate: Sized {
    fn accumulate(&mut self, other: Self) -> Result<()>;
}

/// A map `f` whose fixed point defines the layer output.
pub trait ImplicitMap<T: Scalar> {
    type Lin: Linearization<T>;

    /// Length of the flat state.
    fn dim(&self) -> usize;

    /// Number of independent equal segments of the state (batch samples).
    fn blocks(&self) -> usize {
        1
    }

    /// `f(z)`, without recording anything.
    fn eval(&mut self, z: &[T]) -> Result<Vec<T>>;

    /// Records `f` at `z` for vector–Jacobian products.
    fn linearize(&mut self, z: &[T]) -> Result<Self::Lin>;
}

/// `f` recorded at one point.
pub trait Linearization<T: Scalar> {
    type Grads: Accumulate;

    /// `f(z)` at the recorded point.
    fn output(&self) -> &[T];

    /// `c·∂f/∂z`.
    fn vjp_state(&self, cotangent: &[T]) -> Result<Vec<T>>;

    /// `(c·∂f/∂z, c·∂f/∂inputs)`.
    fn vjp(&self, cotangent: &[T]) -> Result<(Vec<T>, Self::Grads)>;
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult<T> {
    /// Flat equilibrium state, the lowest-residual iterate.
    pub z_star: Vec<T>,
    /// `‖f(z*) − z*‖`.
    pub abs_residual: f64,
    pub trace: SolverTrace,
    pub stats: SolverStats,
}

impl<T: Scalar> EquilibriumResult<T> {
    /// `‖f(z*) − z*‖ / (‖z*‖ + 1e-9)`.
    pub fn rel_residual(&self) -> f64 {
        self.abs_residual / (norm(&self.z_star) + REL_RESIDUAL_FLOOR)
    }

    pub fn trace_csv(&self) -> String {
        self.trace.to_csv(Some(Phase::Forward))
    }
}

#[derive(Debug, Clone)]
pub struct AdjointResult<T, G> {
    /// Solution `u` of `u·J_g + ∂ℓ/∂z* = 0`, i.e. `u = u·J_f + ∂ℓ/∂z*`.
    pub adjoint: Vec<T>,
    /// `u·∂f/∂inputs`: the loss gradient with respect to everything `f` reads.
    pub grads: G,
    /// `‖u·J_g + ∂ℓ/∂z*‖ / (‖u‖ + 1e-9)` at the returned adjoint.
    pub rel_residual: f64,
    pub trace: SolverTrace,
    pub stats: SolverStats,
    /// The forward residual exceeded ten times its tolerance, so the
    /// gradient formula is applied away from a fixed point.
    pub stale: bool,
}

impl<T: Scalar, G> AdjointResult<T, G> {
    pub fn trace_csv(&self) -> String {
        self.trace.to_csv(Some(Phase::Backward))
    }
}

/// Solves `f(z) = z` from `z = 0`.
pub fn forward_equilibrium<T: Scalar, M: ImplicitMap<T>>(
    map: &mut M,
    config: &SolverConfig,
) -> Result<EquilibriumResult<T>> {
    forward_equilibrium_with(map, config, |_| {})
}

/// [`forward_equilibrium`] with an observer called on every evaluated iterate.
pub fn forward_equilibrium_with<T: Scalar, M: ImplicitMap<T>>(
    map: &mut M,
    config: &SolverConfig,
    observer: impl FnMut(&Iterate<'_, T>),
) -> Result<EquilibriumResult<T>> {
    let z0 = vec![T::zero(); map.dim()];
    let options = SolveOptions {
        blocks: map.blocks(),
    };
    let out = broyden_solve_with(
        |z: &[T]| {
            let fz = map.eval(z)?;
            Ok(fz.iter().zip(z).map(|(&a, &b)| a - b).collect())
        },
        z0,
        config,
        options,
        observer,
    )?;
    Ok(EquilibriumResult {
        z_star: out.z_star,
        abs_residual: out.best_abs_residual,
        trace: out.trace,
        stats: out.stats,
    })
}

/// Implicit gradients at an equilibrium.
///
/// `loss_grad` is `∂ℓ/∂z*` in the flat layout. `forward_epsilon` is the
/// tolerance the equilibrium was solved to, used for the staleness flag.
pub fn backward_equilibrium<T: Scalar, M: ImplicitMap<T>>(
    map: &mut M,
    equilibrium: &EquilibriumResult<T>,
    loss_grad: &[T],
    config: &SolverConfig,
    forward_epsilon: f64,
) -> Result<AdjointResult<T, <M::Lin as Linearization<T>>::Grads>> {
    let d = map.dim();
    if loss_grad.len() != d || equilibrium.z_star.len() != d {
        return Err(Error::shape(
            "backward_equilibrium",
            &[d],
            &[loss_grad.len().max(equilibrium.z_star.len())],
        ));
    }
    let stale = equilibrium.rel_residual() > 10.0 * forward_epsilon;
    let lin = map.linearize(&equilibrium.z_star)?;
    let options = SolveOptions {
        blocks: map.blocks(),
    };
    let out = broyden_solve_with(
        |u: &[T]| {
            let uj = lin.vjp_state(u)?;
            Ok(uj
                .iter()
                .zip(u)
                .zip(loss_grad)
                .map(|((&a, &b), &c)| a - b + c)
                .collect())
        },
        vec![T::zero(); d],
        config,
        options,
        |_| {},
    )?;
    let adjoint = out.z_star;
    let (_, grads) = lin.vjp(&adjoint)?;
    let rel_residual = out.best_abs_residual / (norm(&adjoint) + REL_RESIDUAL_FLOOR);
    Ok(AdjointResult {
        adjoint,
        grads,
        rel_residual,
        trace: out.trace,
        stats: out.stats,
        stale,
    })
}

/// `depth` explicit applications of `f` from `z = 0`, each kept recorded.
pub struct Unrolled<T, L> {
    pub z_out: Vec<T>,
    pub steps: Vec<L>,
}

pub fn unrolled_forward<T: Scalar, M: ImplicitMap<T>>(
    map: &mut M,
    depth: usize,
) -> Result<Unrolled<T, M::Lin>> {
    if depth == 0 {
        return Err(Error::invalid("unrolled_forward", "depth must be at least 1"));
    }
    let mut z = vec![T::zero(); map.dim()];
    let mut steps = Vec::with_capacity(depth);
    for _ in 0..depth {
        let lin = map.linearize(&z)?;
        z = lin.output().to_vec();
        steps.push(lin);
    }
    Ok(Unrolled { z_out: z, steps })
}

/// Backpropagates `cotangent` on the unrolled output through every
/// recorded application, summing the input gradients.
pub fn unrolled_backward<T: Scalar, L: Linearization<T>>(steps: &[L], cotangent: &[T]) -> Result<L::Grads> {
    let mut c = cotangent.to_vec();
    let mut total: Option<L::Grads> = None;
    for lin in steps.iter().rev() {
        let (cz, g) = lin.vjp(&c)?;
        match &mut total {
            Some(t) => t.accumulate(g)?,
            None => total = Some(g),
        }
        c = cz;
    }
    total.ok_or_else(|| Error::invalid("unrolled_backward", "no recorded steps"))
}
