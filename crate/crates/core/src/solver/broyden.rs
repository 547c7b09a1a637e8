//! Limited-memory Broyden's method.
//!
//! The inverse-Jacobian estimate is kept as `B = −I + Σ uₖ vₖᵀ` over at most
//! `m` stored pairs and is only ever applied to vectors, at `O(m·d)` cost.
//! Each step moves `z ← z − α·B·g(z)`; after the step the pair
//!
//! ```text
//! v = Bᵀ Δz,   u = (Δz − B Δg) / (vᵀ Δg)
//! ```
//!
//! is appended, which is the Sherman–Morrison form of the "good" Broyden
//! secant update `B Δg = Δz`. At capacity the oldest pair is evicted first.
//!
//! Evicting pairs leaves an estimate that no longer satisfies the older secant
//! conditions, and on long solves this can send the iterates off to infinity.
//! When a block's residual climbs above [`RESTART_FACTOR`] times the lowest
//! value since its last restart, that block drops its pairs, so its next step
//! is a plain `z ← f(z)` step from `B = −I`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{dot, norm, relative_residual, SolverConfig, SolverTrace, Termination, TraceRecord};

/// Pairs whose secant denominator is below this fraction of `‖v‖·‖Δg‖` are skipped.
const SECANT_GUARD: f64 = 1e-12;

/// Residual growth over the best residual that triggers a memory restart.
pub const RESTART_FACTOR: f64 = 100.0;

/// Full-length buffers a solve holds besides the low-rank pairs:
/// the iterate, its residual, the best iterate so far and the step.
pub const WORKING_VECTORS: usize = 4;

/// The low-rank factors `U`, `V` of one inverse-Jacobian estimate.
#[derive(Debug, Clone)]
pub struct LowRankInverse<T> {
    dim: usize,
    capacity: usize,
    us: VecDeque<Vec<T>>,
    vs: VecDeque<Vec<T>>,
    ids: VecDeque<u64>,
    next_id: u64,
}

impl<T: Scalar> LowRankInverse<T> {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity: capacity.max(1),
            us: VecDeque::with_capacity(capacity),
            vs: VecDeque::with_capacity(capacity),
            ids: VecDeque::with_capacity(capacity),
            next_id: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.us.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence numbers of the retained pairs, oldest first.
    pub fn retained_ids(&self) -> Vec<u64> {
        self.ids.iter().copied().collect()
    }

    /// Appends a pair, evicting the oldest one at capacity. Returns its sequence number.
    pub fn push(&mut self, u: Vec<T>, v: Vec<T>) -> u64 {
        assert_eq!(u.len(), self.dim, "low-rank update has wrong length");
        assert_eq!(v.len(), self.dim, "low-rank update has wrong length");
        if self.us.len() == self.capacity {
            self.us.pop_front();
            self.vs.pop_front();
            self.ids.pop_front();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.us.push_back(u);
        self.vs.push_back(v);
        self.ids.push_back(id);
        id
    }

    /// Drops every pair, resetting the estimate to `−I`.
    pub fn clear(&mut self) {
        self.us.clear();
        self.vs.clear();
        self.ids.clear();
    }

    /// `B·x = −x + U (Vᵀ x)`.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        Self::low_rank(x, &self.us, &self.vs)
    }

    /// `Bᵀ·x = −x + V (Uᵀ x)`.
    pub fn apply_transpose(&self, x: &[T]) -> Vec<T> {
        Self::low_rank(x, &self.vs, &self.us)
    }

    fn low_rank(x: &[T], left: &VecDeque<Vec<T>>, right: &VecDeque<Vec<T>>) -> Vec<T> {
        let mut out: Vec<T> = x.iter().map(|&v| -v).collect();
        for (l, r) in left.iter().zip(right) {
            let c = dot(r, x);
            for (o, &li) in out.iter_mut().zip(l) {
                *o += c * li;
            }
        }
        out
    }
}

/// Solve options beyond [`SolverConfig`].
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Number of equal, independent segments of the state. Each segment keeps
    /// its own low-rank estimate; the stopping test uses the whole vector.
    /// Segments correspond to batch samples whose Jacobian is block-diagonal.
    pub blocks: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { blocks: 1 }
    }
}

/// View of one evaluated iterate, passed to observers.
#[derive(Debug)]
pub struct Iterate<'a, T> {
    pub iter: usize,
    pub f_evals: usize,
    pub z: &'a [T],
    pub residual: &'a [T],
    pub rel_residual: f64,
    pub abs_residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SolverStats {
    pub updates_applied: usize,
    pub updates_skipped: usize,
    /// Memory restarts triggered by residual growth, summed over blocks.
    pub restarts: usize,
    /// Peak number of full-length vectors held: stored pairs plus working buffers.
    pub peak_stored_vectors: usize,
    /// Sequence numbers of the pairs retained at termination, per block.
    pub retained_updates: Vec<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome<T> {
    /// Lowest-residual point observed (per block, for blocked solves).
    pub z_star: Vec<T>,
    /// `‖g(z_star)‖` as observed during the solve.
    pub best_abs_residual: f64,
    pub trace: SolverTrace,
    pub stats: SolverStats,
}

/// Limited-memory Broyden solve of `residual_fn(z) = 0` from `z0`.
pub fn broyden_solve<T, F>(residual_fn: F, z0: Vec<T>, config: &SolverConfig) -> Result<SolveOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    broyden_solve_with(residual_fn, z0, config, SolveOptions::default(), |_| {})
}

/// [`broyden_solve`] with block structure and a per-evaluation observer.
pub fn broyden_solve_with<T, F, O>(
    mut residual_fn: F,
    z0: Vec<T>,
    config: &SolverConfig,
    options: SolveOptions,
    mut observer: O,
) -> Result<SolveOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
    O: FnMut(&Iterate<'_, T>),
{
    config.validate()?;
    let d = z0.len();
    let blocks = options.blocks.max(1);
    if !d.is_multiple_of(blocks) {
        return Err(Error::invalid(
            "broyden_solve",
            format!("dimension {d} is not divisible into {blocks} blocks"),
        ));
    }
    let seg = d / blocks;
    let alpha = T::from_f64_lossy(config.alpha);

    let mut trace = SolverTrace::new();
    let mut stats = SolverStats::default();
    let mut inverses: Vec<LowRankInverse<T>> =
        (0..blocks).map(|_| LowRankInverse::new(seg, config.memory)).collect();

    let mut evaluate = |z: &[T], f_evals: usize, trace: &mut SolverTrace| -> Result<Vec<T>> {
        let g = residual_fn(z)?;
        if g.len() != d {
            return Err(Error::shape("broyden_solve", &[d], &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            trace.termination = Termination::Aborted;
            return Err(Error::NonFinite {
                f_evals,
                trace: trace.clone(),
            });
        }
        Ok(g)
    };

    let mut z = z0;
    let mut g = evaluate(&z, 1, &mut trace)?;
    let mut best_z = z.clone();
    let mut best_block: Vec<f64> = g.chunks(seg).map(norm).collect();
    let mut since_restart = best_block.clone();
    let mut f_evals = 1;

    let mut record = |iter: usize, f_evals: usize, z: &[T], g: &[T], trace: &mut SolverTrace| {
        let rec = TraceRecord {
            iter,
            f_evals,
            rel_residual: relative_residual(g, z),
            abs_residual: norm(g),
        };
        trace.records.push(rec);
        observer(&Iterate {
            iter,
            f_evals,
            z,
            residual: g,
            rel_residual: rec.rel_residual,
            abs_residual: rec.abs_residual,
        });
        rec.rel_residual
    };

    let mut rel = record(0, f_evals, &z, &g, &mut trace);
    let mut iter = 0;
    let mut peak_pairs = 0;
    trace.termination = Termination::Cap;
    if rel < config.epsilon {
        trace.termination = Termination::Threshold;
    }
    while trace.termination != Termination::Threshold && f_evals < config.max_iters {
        iter += 1;
        let mut step = Vec::with_capacity(d);
        for (inv, gb) in inverses.iter().zip(g.chunks(seg)) {
            step.extend(inv.apply(gb).into_iter().map(|v| -alpha * v));
        }
        let z_new: Vec<T> = z.iter().zip(&step).map(|(&a, &s)| a + s).collect();
        f_evals += 1;
        let g_new = evaluate(&z_new, f_evals, &mut trace)?;

        for (b, inv) in inverses.iter_mut().enumerate() {
            let range = b * seg..(b + 1) * seg;
            let n = norm(&g_new[range.clone()]);
            if n > RESTART_FACTOR * since_restart[b] {
                inv.clear();
                stats.restarts += 1;
                since_restart[b] = n;
                continue;
            }
            since_restart[b] = since_restart[b].min(n);
            let dz = &step[range.clone()];
            let dg: Vec<T> = g_new[range.clone()]
                .iter()
                .zip(&g[range])
                .map(|(&a, &c)| a - c)
                .collect();
            let v = inv.apply_transpose(dz);
            let den = dot(&v, &dg);
            let scale = norm(&v) * norm(&dg);
            let den_f = den.to_f64_lossy();
            if !den_f.is_finite() || den_f.abs() <= SECANT_GUARD * scale || scale == 0.0 {
                stats.updates_skipped += 1;
                continue;
            }
            let bdg = inv.apply(&dg);
            let u: Vec<T> = dz.iter().zip(&bdg).map(|(&a, &c)| (a - c) / den).collect();
            inv.push(u, v);
            stats.updates_applied += 1;
        }
        peak_pairs = peak_pairs.max(inverses.iter().map(LowRankInverse::len).max().unwrap_or(0));

        z = z_new;
        g = g_new;
        for (b, gb) in g.chunks(seg).enumerate() {
            let n = norm(gb);
            if n < best_block[b] {
                best_block[b] = n;
                best_z[b * seg..(b + 1) * seg].copy_from_slice(&z[b * seg..(b + 1) * seg]);
            }
        }
        rel = record(iter, f_evals, &z, &g, &mut trace);
        if rel < config.epsilon {
            trace.termination = Termination::Threshold;
        }
    }

    stats.peak_stored_vectors = 2 * peak_pairs + WORKING_VECTORS;
    stats.retained_updates = inverses.iter().map(LowRankInverse::retained_ids).collect();
    let best_abs_residual = best_block.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(SolveOutcome {
        z_star: best_z,
        best_abs_residual,
        trace,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eps: f64, iters: usize, mem: usize) -> SolverConfig {
        SolverConfig::new(eps, iters, mem).unwrap()
    }

    #[test]
    fn negative_identity_residual_solved_in_one_step() {
        let z0 = vec![3.0, -1.5, 0.25];
        let out = broyden_solve(|z: &[f64]| Ok(z.iter().map(|v| -v).collect()), z0, &cfg(1e-12, 10, 4)).unwrap();
        assert!(out.z_star.iter().all(|&v| v == 0.0));
        assert!(out.trace.f_evals() <= 2);
        assert_eq!(out.trace.termination, Termination::Threshold);
    }

    #[test]
    fn scalar_geometric_fixed_point() {
        let out = broyden_solve(|z: &[f64]| Ok(vec![-0.5 * z[0] + 1.0]), vec![0.0], &cfg(1e-14, 50, 5)).unwrap();
        assert!((out.z_star[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn eviction_keeps_most_recent_pairs() {
        let mut inv = LowRankInverse::<f64>::new(2, 2);
        for _ in 0..5 {
            inv.push(vec![1.0, 0.0], vec![0.0, 1.0]);
        }
        assert_eq!(inv.retained_ids(), vec![3, 4]);
        assert_eq!(inv.len(), 2);
    }

    #[test]
    fn apply_and_transpose_agree_with_dense_form() {
        let mut inv = LowRankInverse::<f64>::new(3, 4);
        inv.push(vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]);
        inv.push(vec![-0.5, 0.0, 1.0], vec![2.0, 1.0, 1.0]);
        // Dense B = −I + Σ u vᵀ.
        let mut b = [[0.0; 3]; 3];
        for (i, row) in b.iter_mut().enumerate() {
            row[i] = -1.0;
        }
        for (u, v) in [([1.0, 2.0, 0.5], [0.0, -1.0, 3.0]), ([-0.5, 0.0, 1.0], [2.0, 1.0, 1.0])] {
            for i in 0..3 {
                for j in 0..3 {
                    b[i][j] += u[i] * v[j];
                }
            }
        }
        let x = [0.3, -1.2, 2.0];
        let bx = inv.apply(&x);
        let btx = inv.apply_transpose(&x);
        for i in 0..3 {
            let e: f64 = (0..3).map(|j| b[i][j] * x[j]).sum();
            let et: f64 = (0..3).map(|j| b[j][i] * x[j]).sum();
            assert!((bx[i] - e).abs() < 1e-14);
            assert!((btx[i] - et).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_residual_aborts_with_trace() {
        let mut calls = 0;
        let err = broyden_solve(
            |z: &[f64]| {
                calls += 1;
                Ok(if calls < 3 { vec![1.0 + 0.1 * z[0]] } else { vec![f64::NAN] })
            },
            vec![0.0],
            &cfg(1e-30, 10, 2),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { f_evals, trace } => {
                assert_eq!(f_evals, 3);
                assert_eq!(trace.records.len(), 2);
                assert_eq!(trace.termination, Termination::Aborted);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = broyden_solve(|_: &[f64]| Ok(vec![0.0; 3]), vec![0.0; 2], &cfg(1e-3, 5, 2));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn blocked_solve_matches_independent_solves() {
        // Two decoupled scalar problems with different fixed points.
        let g = |z: &[f64]| Ok(vec![-0.5 * z[0] + 1.0, -0.8 * z[1] + 4.0]);
        let out = broyden_solve_with(g, vec![0.0, 0.0], &cfg(1e-13, 30, 3), SolveOptions { blocks: 2 }, |_| {}).unwrap();
        assert!((out.z_star[0] - 2.0).abs() < 1e-10);
        assert!((out.z_star[1] - 5.0).abs() < 1e-10);
        assert_eq!(out.stats.retained_updates.len(), 2);
    }
}
