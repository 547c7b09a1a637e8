//! Equilibrium forward pass and implicit backward pass against closed forms,
//! dense adjoint solves and unrolled backpropagation.

use mdeq::autodiff::{live_tapes, peak_tapes, reset_peak_tapes};
use mdeq::cell::{apply_cell, init_params, inject, Activation, DropoutMask, MdeqParams, ModelConfig, ParamKind};
use mdeq::diag::grad_check_instance;
use mdeq::implicit::{
    backward_equilibrium, forward_equilibrium, unrolled_backward, unrolled_forward, Accumulate, CellMap, ImplicitMap,
    Linearization,
};
use mdeq::solver::{SolverConfig, Termination};
use mdeq::train::{forward_backward, Mode, Targets};
use mdeq::{MultiscaleState, Result, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `f(z) = W z + U x`.
struct Affine {
    w: DMatrix<f64>,
    u: DMatrix<f64>,
    x: DVector<f64>,
}

struct AffineLin {
    w: DMatrix<f64>,
    x: DVector<f64>,
    z: DVector<f64>,
    out: Vec<f64>,
}

#[derive(Debug)]
struct AffineGrads {
    w: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl Accumulate for AffineGrads {
    fn accumulate(&mut self, other: Self) -> Result<()> {
        self.w += other.w;
        self.u += other.u;
        Ok(())
    }
}

impl ImplicitMap<f64> for Affine {
    type Lin = AffineLin;

    fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn eval(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.w * DVector::from_column_slice(z) + &self.u * &self.x).as_slice().to_vec())
    }

    fn linearize(&mut self, z: &[f64]) -> Result<AffineLin> {
        let out = self.eval(z)?;
        Ok(AffineLin {
            w: self.w.clone(),
            x: self.x.clone(),
            z: DVector::from_column_slice(z),
            out,
        })
    }
}

impl Linearization<f64> for AffineLin {
    type Grads = AffineGrads;

    fn output(&self) -> &[f64] {
        &self.out
    }

    fn vjp_state(&self, c: &[f64]) -> Result<Vec<f64>> {
        Ok((self.w.transpose() * DVector::from_column_slice(c)).as_slice().to_vec())
    }

    fn vjp(&self, c: &[f64]) -> Result<(Vec<f64>, AffineGrads)> {
        let cv = DVector::from_column_slice(c);
        Ok((
            self.vjp_state(c)?,
            AffineGrads {
                w: &cv * self.z.transpose(),
                u: &cv * self.x.transpose(),
            },
        ))
    }
}

fn affine(d: usize, k: usize, seed: u64) -> Affine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    let w = normal(d, d, 0.4 / (d as f64).sqrt());
    let u = normal(d, k, 1.0);
    let x = normal(k, 1, 1.0).column(0).into_owned();
    Affine { w, u, x }
}

fn tight(iters: usize) -> SolverConfig {
    SolverConfig::new(1e-12, iters, iters).unwrap()
}

#[test]
fn affine_equilibrium_matches_closed_form() {
    let mut map = affine(30, 5, 1);
    let a = DMatrix::identity(30, 30) - &map.w;
    let exact = a.clone().lu().solve(&(&map.u * &map.x)).unwrap();
    let eq = forward_equilibrium(&mut map, &tight(80)).unwrap();
    let err = (DVector::from_column_slice(&eq.z_star) - &exact).norm() / exact.norm();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn affine_implicit_gradient_matches_closed_form() {
    let mut map = affine(30, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = DVector::from_fn(30, |_, _| rng.random::<f64>() - 0.5);
    let eq = forward_equilibrium(&mut map, &tight(80)).unwrap();
    let adj = backward_equilibrium(&mut map, &eq, c.as_slice(), &tight(80), 1e-12).unwrap();

    // ℓ = cᵀ(I−W)⁻¹Ux ⇒ ∂ℓ/∂W = λ z*ᵀ, ∂ℓ/∂U = λ xᵀ with λ = (I−W)⁻ᵀc.
    let a = DMatrix::identity(30, 30) - &map.w;
    let z = a.clone().lu().solve(&(&map.u * &map.x)).unwrap();
    let lambda = a.transpose().lu().solve(&c).unwrap();
    let dw = &lambda * z.transpose();
    let du = &lambda * map.x.transpose();
    assert!((&adj.grads.w - &dw).norm() / dw.norm() < 1e-6);
    assert!((&adj.grads.u - &du).norm() / du.norm() < 1e-6);
    assert!(!adj.stale);
    assert!(adj.rel_residual < 1e-10);

    // Central differences of the closed-form loss in one entry of W.
    let loss = |w: &DMatrix<f64>| {
        let a = DMatrix::identity(30, 30) - w;
        c.dot(&a.lu().solve(&(&map.u * &map.x)).unwrap())
    };
    let h = 1e-6;
    let mut wp = map.w.clone();
    wp[(4, 7)] += h;
    let mut wm = map.w.clone();
    wm[(4, 7)] -= h;
    let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
    assert!((fd - adj.grads.w[(4, 7)]).abs() < 1e-6 * (1.0 + fd.abs()));
}

#[test]
fn zero_loss_gradient_gives_exactly_zero() {
    let mut map = affine(10, 3, 4);
    let eq = forward_equilibrium(&mut map, &tight(40)).unwrap();
    let adj = backward_equilibrium(&mut map, &eq, &[0.0; 10], &tight(40), 1e-12).unwrap();
    assert!(adj.adjoint.iter().all(|&v| v == 0.0));
    assert!(adj.grads.w.iter().all(|&v| v == 0.0));
    assert!(adj.grads.u.iter().all(|&v| v == 0.0));
}

fn small_cell() -> (ModelConfig, MdeqParams<f64>, Tensor<f64>) {
    let config = ModelConfig {
        fusion_gamma: 0.2,
        ..ModelConfig::tiny()
    };
    let p = init_params::<f64>(&config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random::<f64>() - 0.5);
    let x = inject(&p, &config, &image).unwrap();
    (config, p, x)
}

#[test]
fn cell_adjoint_matches_dense_solve() {
    let (config, p, x) = small_cell();
    let mask = DropoutMask::identity();
    let act = Activation::Softplus { beta: 5.0 };
    let mut map = CellMap::new(&p, &config, x, &mask, act).unwrap();
    let d = map.dim();
    assert!(d <= 200, "{d}");
    let eq = forward_equilibrium(&mut map, &tight(200)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let adj = backward_equilibrium(&mut map, &eq, &c, &tight(200), 1e-12).unwrap();

    let lin = map.linearize(&eq.z_star).unwrap();
    let mut jt = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        jt.set_column(i, &DVector::from_vec(lin.vjp_state(&e).unwrap()));
    }
    // u = Jᵀu + c  ⇔  (I − Jᵀ) u = c.
    let u = (DMatrix::identity(d, d) - jt).lu().solve(&DVector::from_vec(c)).unwrap();
    let err = (DVector::from_column_slice(&adj.adjoint) - &u).amax() / u.amax();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn constant_map_converges_immediately() {
    let config = ModelConfig::tiny();
    let mut p = init_params::<f64>(&config, 0).unwrap();
    for e in p.iter_mut() {
        let v = match e.kind {
            ParamKind::NormBeta if e.name.starts_with("fuse.post") => 0.25,
            _ => 0.0,
        };
        e.value = Tensor::full(e.value.shape(), v);
    }
    let x = Tensor::zeros(&[2, 4, 8, 8]);
    let mask = DropoutMask::identity();
    let mut map = CellMap::new(&p, &config, x, &mask, Activation::Relu).unwrap();
    let eq = forward_equilibrium(&mut map, &SolverConfig::new(1e-10, 15, 5).unwrap()).unwrap();
    assert!(eq.trace.f_evals() <= 2);
    assert_eq!(eq.trace.termination, Termination::Threshold);
    assert!(eq.z_star.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn best_residual_is_reported_for_the_returned_state() {
    let (config, p, x) = small_cell();
    let mask = DropoutMask::identity();
    let mut map = CellMap::new(&p, &config, x, &mask, Activation::Relu).unwrap();
    let eq = forward_equilibrium(&mut map, &SolverConfig::new(1e-30, 8, 3).unwrap()).unwrap();
    let fz = map.eval(&eq.z_star).unwrap();
    let r: f64 = fz.iter().zip(&eq.z_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!((r - eq.abs_residual).abs() <= 1e-12 * (1.0 + r));
    assert!(eq.trace.records.iter().all(|rec| rec.abs_residual >= eq.abs_residual - 1e-15));
}

#[test]
fn unrolling_once_is_one_application() {
    let (config, p, x) = small_cell();
    let mask = DropoutMask::identity();
    let act = Activation::Relu;
    let mut map = CellMap::new(&p, &config, x.clone(), &mask, act).unwrap();
    let u = unrolled_forward(&mut map, 1).unwrap();
    let zero = MultiscaleState::zeros(1, map.shapes()).unwrap();
    let direct = apply_cell(&p, &config, &zero, &x, &mask, act).unwrap().flatten();
    assert_eq!(u.z_out, direct);
    assert!(unrolled_forward(&mut map, 0).is_err());
}

#[test]
fn deep_unrolling_approaches_the_equilibrium() {
    let (config, p, images, _) = grad_check_instance(0).unwrap();
    let x = inject(&p, &config, &images).unwrap();
    let mask = DropoutMask::identity();
    let mut map = CellMap::new(&p, &config, x, &mask, Activation::Softplus { beta: 5.0 }).unwrap();
    let eq = forward_equilibrium(&mut map, &tight(300)).unwrap();
    let u = unrolled_forward(&mut map, 50).unwrap();
    let diff: f64 = u.z_out.iter().zip(&eq.z_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = eq.z_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-3, "{:e}", diff / scale);
}

#[test]
fn unrolled_tapes_grow_with_depth_and_implicit_keeps_one() {
    let (config, p, x) = small_cell();
    let mask = DropoutMask::identity();
    let mut map = CellMap::new(&p, &config, x, &mask, Activation::Relu).unwrap();
    let base = live_tapes();
    for depth in [1, 4, 9] {
        let u = unrolled_forward(&mut map, depth).unwrap();
        assert_eq!(live_tapes() - base, depth);
        drop(u);
        assert_eq!(live_tapes(), base);
    }

    reset_peak_tapes();
    let eq = forward_equilibrium(&mut map, &SolverConfig::new(1e-30, 12, 5).unwrap()).unwrap();
    assert_eq!(peak_tapes(), base);
    let c = vec![1.0; map.dim()];
    backward_equilibrium(&mut map, &eq, &c, &SolverConfig::new(1e-30, 12, 5).unwrap(), 1e-3).unwrap();
    assert_eq!(peak_tapes() - base, 1);
}

#[test]
fn unrolled_gradients_accumulate_every_application() {
    let mut map = affine(6, 2, 5);
    let steps = unrolled_forward(&mut map, 3).unwrap();
    let c = DVector::from_element(6, 1.0);
    let g = unrolled_backward(&steps.steps, c.as_slice()).unwrap();
    // z₃ = W²Ux + WUx + Ux ⇒ ∂(cᵀz₃)/∂U = (I + Wᵀ + Wᵀ²) c xᵀ.
    let wt = map.w.transpose();
    let lam = &c + &wt * &c + &wt * &wt * &c;
    assert!((g.u - &lam * map.x.transpose()).norm() < 1e-12);
}

fn tiny_batch() -> (ModelConfig, MdeqParams<f64>, Tensor<f64>, Targets) {
    let config = ModelConfig {
        dropout_rate: 0.3,
        fusion_gamma: 0.2,
        ..ModelConfig::tiny()
    };
    let p = init_params::<f64>(&config, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random::<f64>() - 0.5);
    let targets = Targets {
        classes: Some(vec![1, 3]),
        dense: None,
    };
    (config, p, images, targets)
}

fn implicit_mode() -> Mode {
    Mode::Implicit {
        forward: SolverConfig::new(1e-9, 40, 20).unwrap(),
        backward: SolverConfig::new(1e-9, 40, 20).unwrap(),
    }
}

#[test]
fn one_mask_per_step() {
    let (config, p, images, targets) = tiny_batch();
    let act = Activation::Relu;
    let m1 = DropoutMask::sample(0.3, 2, &config.channels, 1).unwrap();
    let m2 = DropoutMask::sample(0.3, 2, &config.channels, 2).unwrap();
    let a = forward_backward(&p, &config, &images, &targets, &m1, act, implicit_mode()).unwrap();
    let b = forward_backward(&p, &config, &images, &targets, &m2, act, implicit_mode()).unwrap();
    assert!(!a.invocations.is_empty());
    assert!(a.invocations.iter().all(|&id| id == m1.id()));
    assert!(b.invocations.iter().all(|&id| id == m2.id()));
    assert_ne!(m1.id(), m2.id());

    let u = forward_backward(&p, &config, &images, &targets, &m1, act, Mode::Unrolled { depth: 4 }).unwrap();
    assert_eq!(u.invocations, vec![m1.id(); 4]);
}

#[test]
fn backward_with_a_different_mask_changes_gradients() {
    let (config, p, images, _) = tiny_batch();
    let act = Activation::Softplus { beta: 5.0 };
    let m1 = DropoutMask::sample(0.3, 2, &config.channels, 1).unwrap();
    let m2 = DropoutMask::sample(0.3, 2, &config.channels, 2).unwrap();
    let x = inject(&p, &config, &images).unwrap();
    let cfg = SolverConfig::new(1e-10, 60, 30).unwrap();

    let mut fwd = CellMap::new(&p, &config, x.clone(), &m1, act).unwrap();
    let eq = forward_equilibrium(&mut fwd, &cfg).unwrap();
    let c: Vec<f64> = (0..fwd.dim()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
    let same = backward_equilibrium(&mut fwd, &eq, &c, &cfg, 1e-10).unwrap();

    let mut mutated = CellMap::new(&p, &config, x, &m2, act).unwrap();
    let other = backward_equilibrium(&mut mutated, &eq, &c, &cfg, 1e-10).unwrap();
    let name = "block1.conv1.v";
    let g1 = same.grads.get(name).unwrap();
    let g2 = other.grads.get(name).unwrap();
    assert!(g1.max_abs_diff(g2).unwrap() > 1e-3 * g1.max_abs());
}
