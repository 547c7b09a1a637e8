//! Black-box root and fixed-point solvers over flat vectors.
//!
//! [`broyden_solve`] finds a root of `g(z)` with a limited-memory
//! quasi-Newton method whose inverse-Jacobian estimate is `−I + U·Vᵀ`;
//! [`naive_iterate`] repeats `z ← f(z)`. Both produce a [`SolverTrace`] with
//! one record per function evaluation.

mod broyden;
mod config;
mod naive;
mod trace;

pub use broyden::{
    broyden_solve, broyden_solve_with, Iterate, LowRankInverse, SolveOptions, SolveOutcome,
    SolverStats, WORKING_VECTORS,
};
pub use config::SolverConfig;
pub use naive::{naive_iterate, naive_iterate_with};
pub use trace::{Phase, SolverTrace, Termination, TraceRecord};

use crate::scalar::Scalar;

/// Denominator guard used in every relative residual.
pub const REL_RESIDUAL_FLOOR: f64 = 1e-9;

pub fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter()
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `‖r‖ / (‖z‖ + 1e-9)`.
pub fn relative_residual<T: Scalar>(residual: &[T], z: &[T]) -> f64 {
    norm(residual) / (norm(z) + REL_RESIDUAL_FLOOR)
}
