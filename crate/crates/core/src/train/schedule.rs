use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing: `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(
            "cosine_lr",
            format!("step {step} is past the schedule end {total_steps}"),
        ));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.001).unwrap(), 0.1);
        assert!((cosine_lr(100, 100, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 0.0).is_err());
    }
}
