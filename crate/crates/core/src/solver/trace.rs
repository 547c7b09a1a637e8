use std::fmt::{self, Write as _};

/// One function evaluation of a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub f_evals: usize,
    pub rel_residual: f64,
    pub abs_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative residual fell below epsilon.
    Threshold,
    /// Evaluation budget exhausted.
    Cap,
    /// A non-finite value was produced.
    Aborted,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Threshold => "threshold",
            Termination::Cap => "cap",
            Termination::Aborted => "abort",
        })
    }
}

/// Which half of an implicit step a trace belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

impl SolverTrace {
    pub(crate) fn new() -> Self {
        Self {
            records: Vec::new(),
            termination: Termination::Cap,
        }
    }

    pub fn f_evals(&self) -> usize {
        self.records.last().map_or(0, |r| r.f_evals)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn best_abs_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.abs_residual)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_rel_residual(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.rel_residual)
    }

    /// CSV with header `iter,f_evals,rel_residual,abs_residual` and a closing
    /// `# reason=<threshold|cap|abort>` line. A phase tag, when given, is
    /// written as a leading `# phase=<forward|backward>` line.
    pub fn to_csv(&self, phase: Option<Phase>) -> String {
        let mut s = String::new();
        if let Some(p) = phase {
            let _ = writeln!(s, "# phase={p}");
        }
        s.push_str("iter,f_evals,rel_residual,abs_residual\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e}",
                r.iter, r.f_evals, r.rel_residual, r.abs_residual
            );
        }
        let _ = writeln!(s, "# reason={}", self.termination);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema() {
        let trace = SolverTrace {
            records: vec![
                TraceRecord {
                    iter: 0,
                    f_evals: 1,
                    rel_residual: 0.5,
                    abs_residual: 2.0,
                },
                TraceRecord {
                    iter: 1,
                    f_evals: 2,
                    rel_residual: 0.25,
                    abs_residual: 1.0,
                },
            ],
            termination: Termination::Threshold,
        };
        let csv = trace.to_csv(None);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iter,f_evals,rel_residual,abs_residual");
        assert_eq!(lines[1], "0,1,5e-1,2e0");
        assert_eq!(lines.last(), Some(&"# reason=threshold"));
        assert!(trace.to_csv(Some(Phase::Backward)).starts_with("# phase=backward\n"));
    }
}
