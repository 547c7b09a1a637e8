use crate::error::{Error, Result};

/// Stopping and memory controls shared by both solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Stop once the relative residual `‖g(z)‖/(‖z‖+1e-9)` falls below this.
    pub epsilon: f64,
    /// Maximum number of function evaluations, the initial one included.
    pub max_iters: usize,
    /// Number of low-rank update pairs kept (Broyden only).
    pub memory: usize,
    /// Step size.
    pub alpha: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iters: 15,
            memory: 12,
            alpha: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn new(epsilon: f64, max_iters: usize, memory: usize) -> Result<Self> {
        let cfg = Self {
            epsilon,
            max_iters,
            memory,
            alpha: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("solver epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("solver max_iters must be ≥ 1".into()));
        }
        if self.memory == 0 {
            return Err(Error::Config("solver memory must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("solver alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(SolverConfig::new(1e-3, 10, 5).is_ok());
        assert!(SolverConfig::new(0.0, 10, 5).is_err());
        assert!(SolverConfig::new(1e-3, 0, 5).is_err());
        assert!(SolverConfig::new(1e-3, 10, 0).is_err());
        assert!(SolverConfig::default().with_alpha(-1.0).is_err());
    }
}
