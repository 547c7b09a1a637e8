//! Power-iteration estimate of a Jacobian's spectral radius from
//! vector–Jacobian products alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::solver::norm;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    /// Geometric mean of the growth factors over the second half of the iterations.
    pub radius: f64,
    /// Growth factor `‖Jᵀv‖` of every iteration, `v` unit-norm.
    pub growth: Vec<f64>,
}

/// Iterates `v ← Jᵀv / ‖Jᵀv‖` from a seeded Gaussian start. `Jᵀ` has the
/// same eigenvalues as `J`, so the growth factors approach the spectral
/// radius; averaging their logarithms also handles a dominant complex pair.
pub fn power_iteration<T: Scalar>(
    dim: usize,
    mut vjp: impl FnMut(&[T]) -> Result<Vec<T>>,
    iters: usize,
    seed: u64,
) -> Result<SpectralEstimate> {
    if dim == 0 || iters == 0 {
        return Err(Error::invalid("power_iteration", "dimension and iterations must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<T> = (0..dim)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
        .collect();
    let n0 = T::from_f64_lossy(norm(&v));
    v.iter_mut().for_each(|x| *x /= n0);
    let mut growth = Vec::with_capacity(iters);
    for _ in 0..iters {
        let w = vjp(&v)?;
        if w.len() != dim {
            return Err(Error::shape("power_iteration", &[dim], &[w.len()]));
        }
        let gf = norm(&w);
        growth.push(gf);
        if !gf.is_finite() {
            return Err(Error::invalid("power_iteration", "non-finite growth"));
        }
        if gf == 0.0 {
            break;
        }
        let g = T::from_f64_lossy(gf);
        v = w.into_iter().map(|x| x / g).collect();
    }
    let tail = &growth[growth.len() / 2..];
    let radius = if tail.contains(&0.0) {
        0.0
    } else {
        (tail.iter().map(|g| g.ln()).sum::<f64>() / tail.len() as f64).exp()
    };
    Ok(SpectralEstimate { radius, growth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_radius() {
        let d = [0.3, -0.8, 0.5, 0.1];
        let est = power_iteration::<f64>(4, |v| Ok(v.iter().zip(d).map(|(x, s)| x * s).collect()), 200, 1)
            .unwrap();
        assert!((est.radius - 0.8).abs() < 1e-6, "{}", est.radius);
    }

    #[test]
    fn rotation_pair_radius() {
        let (r, t) = (0.6f64, 0.7f64);
        let est = power_iteration::<f64>(
            2,
            |v| Ok(vec![r * (t.cos() * v[0] + t.sin() * v[1]), r * (-t.sin() * v[0] + t.cos() * v[1])]),
            50,
            2,
        )
        .unwrap();
        assert!((est.radius - 0.6).abs() < 1e-9);
    }
}
