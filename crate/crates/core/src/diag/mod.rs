//! Diagnostics behind the command-line tool: gradient verification,
//! convergence traces, memory accounting and the solver bench.

pub mod bench;
pub mod converge;
pub mod grad_check;
pub mod mem_audit;

pub use bench::{bench_csv, solver_bench, BenchRow};
pub use converge::{converge, ConvergeReport, ConvergeRow};
pub use grad_check::{grad_check, grad_check_instance, grad_check_model, GradCheckConfig, GradCheckReport};
pub use mem_audit::{mem_audit, mem_csv, MemRow};
