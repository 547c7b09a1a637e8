//! Solver regression suite: affine systems with a dense-solve oracle,
//! a smooth contraction, and naive iteration of an expanding map.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::solver::{broyden_solve, naive_iterate, SolverConfig};

pub const BENCH_HEADER: &str = "case,solver,dim,seed,f_evals,termination,rel_residual,oracle_error";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub case: &'static str,
    pub solver: &'static str,
    pub dim: usize,
    pub seed: u64,
    pub f_evals: usize,
    pub termination: String,
    pub rel_residual: f64,
    /// `‖z − z_oracle‖ / ‖z_oracle‖` where an oracle exists.
    pub oracle_error: Option<f64>,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let oracle = r.oracle_error.map_or(String::new(), |e| format!("{e:e}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:e},{}",
            r.case, r.solver, r.dim, r.seed, r.f_evals, r.termination, r.rel_residual, oracle
        );
    }
    s
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `A = I + 0.3·R/√d` with standard normal `R`, and a standard normal `b`.
pub fn affine_system(dim: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 0.3 / (dim as f64).sqrt();
    let r = gaussian(&mut rng, dim * dim);
    let a = DMatrix::from_fn(dim, dim, |i, j| f64::from(u8::from(i == j)) + s * r[i * dim + j]);
    let b = DVector::from_vec(gaussian(&mut rng, dim));
    (a, b)
}

fn rel_diff(z: &[f64], oracle: &[f64]) -> f64 {
    let d: f64 = z.iter().zip(oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
    d / n
}

/// Solves `g(z) = b − A·z = 0` and compares with an LU solve.
pub fn bench_affine(dim: usize, seed: u64, config: &SolverConfig) -> Result<BenchRow> {
    let (a, b) = affine_system(dim, seed);
    let oracle = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::invalid("bench_affine", "singular system"))?;
    let out = broyden_solve(
        |z: &[f64]| {
            let az = &a * DVector::from_column_slice(z);
            Ok((&b - az).as_slice().to_vec())
        },
        vec![0.0; dim],
        config,
    )?;
    Ok(BenchRow {
        case: "affine",
        solver: "broyden",
        dim,
        seed,
        f_evals: out.trace.f_evals(),
        termination: out.trace.termination.to_string(),
        rel_residual: out.trace.final_rel_residual(),
        oracle_error: Some(rel_diff(&out.z_star, oracle.as_slice())),
    })
}

/// `f(z) = 0.5·tanh(W·z) + c` with `‖W‖₂ ≲ 1`; the oracle is a long naive iteration.
pub fn bench_contraction(dim: usize, seed: u64, config: &SolverConfig) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let s = 0.45 / (dim as f64).sqrt();
    let w = DMatrix::from_vec(dim, dim, gaussian(&mut rng, dim * dim)) * s;
    let c = DVector::from_vec(gaussian(&mut rng, dim));
    let f = |z: &[f64]| -> Result<Vec<f64>> {
        let wz = &w * DVector::from_column_slice(z);
        Ok(wz.iter().zip(c.iter()).map(|(v, ci)| 0.5 * v.tanh() + ci).collect())
    };
    let oracle = naive_iterate(f, vec![0.0; dim], &SolverConfig::new(1e-15, 2000, 1)?)?;
    let out = broyden_solve(
        |z: &[f64]| Ok(f(z)?.iter().zip(z).map(|(a, b)| a - b).collect()),
        vec![0.0; dim],
        config,
    )?;
    Ok(BenchRow {
        case: "contraction",
        solver: "broyden",
        dim,
        seed,
        f_evals: out.trace.f_evals(),
        termination: out.trace.termination.to_string(),
        rel_residual: out.trace.final_rel_residual(),
        oracle_error: Some(rel_diff(&out.z_star, &oracle.z_star)),
    })
}

/// Naive iteration of the expanding map `f(z) = 2z` from a random start:
/// the residual doubles every step until the cap.
pub fn bench_expanding(dim: usize, seed: u64, config: &SolverConfig) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE0);
    let z0 = gaussian(&mut rng, dim);
    let out = naive_iterate(|z: &[f64]| Ok(z.iter().map(|v| 2.0 * v).collect()), z0, config)?;
    Ok(BenchRow {
        case: "expanding",
        solver: "naive",
        dim,
        seed,
        f_evals: out.trace.f_evals(),
        termination: out.trace.termination.to_string(),
        rel_residual: out.trace.final_rel_residual(),
        oracle_error: None,
    })
}

/// Tolerance of the bench solves.
pub const BENCH_TOLERANCE: f64 = 1e-8;
/// f-evaluation cap of the bench solves.
pub const BENCH_CAP: usize = 200;

/// The full suite over `seeds` with `memory` stored updates.
pub fn solver_bench(seeds: &[u64], memory: usize) -> Result<Vec<BenchRow>> {
    let config = SolverConfig::new(BENCH_TOLERANCE, BENCH_CAP, memory)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for dim in [10, 100, 1000] {
            rows.push(bench_affine(dim, seed, &config)?);
        }
        rows.push(bench_contraction(100, seed, &config)?);
        rows.push(bench_expanding(10, seed, &SolverConfig::new(BENCH_TOLERANCE, 50, memory)?)?);
    }
    Ok(rows)
}
