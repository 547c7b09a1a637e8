//! Broyden versus naive iteration at matched f-evaluation budgets, with
//! per-scale residuals.

use std::fmt::Write as _;

use crate::cell::{inject, Activation, DropoutMask, MdeqParams, ModelConfig};
use crate::error::Result;
use crate::implicit::{forward_equilibrium_with, CellMap, ImplicitMap};
use crate::scalar::Scalar;
use crate::solver::{naive_iterate_with, norm, Iterate, SolverConfig, REL_RESIDUAL_FLOOR};
use crate::tensor::Tensor;

pub const CONVERGE_HEADER: &str = "method,batch,f_evals,scale,rel_residual";

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeRow {
    pub method: &'static str,
    pub batch: usize,
    pub f_evals: usize,
    /// 0 for the whole state, `k ≥ 1` for scale `k`.
    pub scale: usize,
    pub rel_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub batch: usize,
    /// Lowest aggregate relative residual within the budget.
    pub broyden_best: f64,
    pub naive_best: f64,
    /// Per-scale relative residual `‖f(z*)ₖ − z*ₖ‖ / ‖z*ₖ‖` at Broyden's returned point.
    pub broyden_final_scales: Vec<f64>,
    /// First Broyden f-evaluation at which each scale is below the tolerance.
    pub scale_evals_to_tolerance: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergeReport {
    pub rows: Vec<ConvergeRow>,
    pub batches: Vec<BatchSummary>,
    pub tolerance: f64,
}

impl ConvergeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(CONVERGE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:e}", r.method, r.batch, r.f_evals, r.scale, r.rel_residual);
        }
        s
    }

    /// Batches where Broyden's residual is at most naive iteration's.
    pub fn broyden_wins(&self) -> usize {
        self.batches.iter().filter(|b| b.broyden_best <= b.naive_best).count()
    }

    /// Batches where every scale ends below the tolerance.
    pub fn all_scales_converged(&self) -> usize {
        self.batches
            .iter()
            .filter(|b| b.broyden_final_scales.iter().all(|&r| r < self.tolerance))
            .count()
    }
}

fn scale_residuals<T: Scalar>(map: &CellMap<'_, T>, z: &[T], residual: &[T]) -> Result<Vec<f64>> {
    let zs = map.state(z)?;
    let rs = map.state(residual)?;
    Ok(zs
        .scales()
        .iter()
        .zip(rs.scales())
        .map(|(z, r)| norm(r.data()) / (norm(z.data()) + REL_RESIDUAL_FLOOR))
        .collect())
}

fn record<T: Scalar>(
    map: &CellMap<'_, T>,
    rows: &mut Vec<ConvergeRow>,
    method: &'static str,
    batch: usize,
    it: &Iterate<'_, T>,
) -> Result<Vec<f64>> {
    rows.push(ConvergeRow {
        method,
        batch,
        f_evals: it.f_evals,
        scale: 0,
        rel_residual: it.rel_residual,
    });
    let per = scale_residuals(map, it.z, it.residual)?;
    for (k, &r) in per.iter().enumerate() {
        rows.push(ConvergeRow {
            method,
            batch,
            f_evals: it.f_evals,
            scale: k + 1,
            rel_residual: r,
        });
    }
    Ok(per)
}

/// Runs both solvers for exactly `budget` f-evaluations on each batch.
/// Broyden uses `memory` stored updates; `tolerance` only enters the
/// per-scale summary.
#[allow(clippy::too_many_arguments)]
pub fn converge<T: Scalar>(
    params: &MdeqParams<T>,
    model: &ModelConfig,
    batches: &[Tensor<T>],
    budget: usize,
    memory: usize,
    tolerance: f64,
    act: Activation,
) -> Result<ConvergeReport> {
    // Running past the threshold keeps the budgets matched.
    let unbounded = SolverConfig::new(f64::MIN_POSITIVE, budget, memory)?;
    let mask = DropoutMask::identity();
    let mut report = ConvergeReport {
        tolerance,
        ..Default::default()
    };
    for (b, images) in batches.iter().enumerate() {
        let x = inject(params, model, images)?;
        let mut map = CellMap::new(params, model, x, &mask, act)?;
        let probe = CellMap::new(params, model, map.injection().clone(), &mask, act)?;

        let mut rows = Vec::new();
        let mut first_below: Vec<Option<usize>> = vec![None; model.n_scales()];
        let mut failure = None;
        let eq = forward_equilibrium_with(&mut map, &unbounded, |it| {
            match record(&probe, &mut rows, "broyden", b, it) {
                Ok(per) => {
                    for (k, &r) in per.iter().enumerate() {
                        if r < tolerance && first_below[k].is_none() {
                            first_below[k] = Some(it.f_evals);
                        }
                    }
                }
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure.take() {
            return Err(e);
        }
        let f_star = map.eval(&eq.z_star)?;
        let r_star: Vec<T> = f_star.iter().zip(&eq.z_star).map(|(&a, &b)| a - b).collect();
        let final_scales = scale_residuals(&probe, &eq.z_star, &r_star)?;
        let broyden_best = eq.trace.records.iter().map(|r| r.rel_residual).fold(f64::INFINITY, f64::min);

        let dim = map.dim();
        let naive = naive_iterate_with(|z: &[T]| map.eval(z), vec![T::zero(); dim], &unbounded, |it| {
            if let Err(e) = record(&probe, &mut rows, "naive", b, it) {
                failure = Some(e);
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let naive_best = naive.trace.records.iter().map(|r| r.rel_residual).fold(f64::INFINITY, f64::min);

        report.rows.extend(rows);
        report.batches.push(BatchSummary {
            batch: b,
            broyden_best,
            naive_best,
            broyden_final_scales: final_scales,
            scale_evals_to_tolerance: first_below,
        });
    }
    Ok(report)
}
