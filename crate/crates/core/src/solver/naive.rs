use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::broyden::Iterate;
use super::{norm, relative_residual, SolveOutcome, SolverConfig, SolverStats, SolverTrace, Termination, TraceRecord};

/// Plain fixed-point iteration `z ← f(z)`.
///
/// Record `k` describes iterate `z_k` and its residual `f(z_k) − z_k`; the
/// returned point is the last image `f(z_k)`.
pub fn naive_iterate<T, F>(f: F, z0: Vec<T>, config: &SolverConfig) -> Result<SolveOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    naive_iterate_with(f, z0, config, |_| {})
}

pub fn naive_iterate_with<T, F, O>(
    mut f: F,
    z0: Vec<T>,
    config: &SolverConfig,
    mut observer: O,
) -> Result<SolveOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
    O: FnMut(&Iterate<'_, T>),
{
    config.validate()?;
    let d = z0.len();
    let mut trace = SolverTrace::new();
    let mut z = z0;
    let mut best = f64::INFINITY;
    for iter in 0..config.max_iters {
        let fz = f(&z)?;
        if fz.len() != d {
            return Err(Error::shape("naive_iterate", &[d], &[fz.len()]));
        }
        let f_evals = iter + 1;
        if fz.iter().any(|v| !v.is_finite()) {
            trace.termination = Termination::Aborted;
            return Err(Error::NonFinite { f_evals, trace });
        }
        let g: Vec<T> = fz.iter().zip(&z).map(|(&a, &b)| a - b).collect();
        let rec = TraceRecord {
            iter,
            f_evals,
            rel_residual: relative_residual(&g, &z),
            abs_residual: norm(&g),
        };
        best = best.min(rec.abs_residual);
        trace.records.push(rec);
        observer(&Iterate {
            iter,
            f_evals,
            z: &z,
            residual: &g,
            rel_residual: rec.rel_residual,
            abs_residual: rec.abs_residual,
        });
        z = fz;
        if rec.rel_residual < config.epsilon {
            trace.termination = Termination::Threshold;
            break;
        }
    }
    Ok(SolveOutcome {
        z_star: z,
        best_abs_residual: best,
        trace,
        stats: SolverStats {
            peak_stored_vectors: 2,
            ..SolverStats::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_iterates() {
        let cfg = SolverConfig::new(1e-30, 20, 1).unwrap();
        let mut seen = Vec::new();
        let out = naive_iterate_with(|z: &[f64]| Ok(vec![0.5 * z[0] + 1.0]), vec![0.0], &cfg, |it| {
            seen.push(it.z[0])
        })
        .unwrap();
        assert_eq!(&seen[..4], &[0.0, 1.0, 1.5, 1.75]);
        assert!((out.z_star[0] - 2.0).abs() < 1e-5);
        assert_eq!(out.trace.records.len(), 20);
    }

    #[test]
    fn expanding_map_hits_cap() {
        let cfg = SolverConfig::new(1e-6, 12, 1).unwrap();
        let out = naive_iterate(|z: &[f64]| Ok(vec![2.0 * z[0]]), vec![1.0], &cfg).unwrap();
        assert_eq!(out.trace.termination, Termination::Cap);
        let first = out.trace.records[0].abs_residual;
        let last = out.trace.last().unwrap().abs_residual;
        assert!(last > 1000.0 * first);
    }

    #[test]
    fn non_finite_aborts() {
        let cfg = SolverConfig::new(1e-6, 5000, 1).unwrap();
        let err = naive_iterate(|z: &[f64]| Ok(vec![z[0] * 1e10]), vec![1.0], &cfg).unwrap_err();
        assert!(err.is_numerical());
    }
}
