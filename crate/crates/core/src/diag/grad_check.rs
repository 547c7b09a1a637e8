//! Three-way gradient verification on a tiny 64-bit model: implicit
//! gradients against central finite differences and against backpropagation
//! through a deep unrolled stack.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell::{init_params, Activation, DropoutMask, MdeqParams, ModelConfig};
use crate::error::Result;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;
use crate::train::{forward_backward, loss_value, Mode, Targets};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Sampled coordinates per parameter tensor for finite differences.
    pub coords: usize,
    /// Central-difference step.
    pub step: f64,
    /// Forward and backward solver tolerance.
    pub tolerance: f64,
    pub fd_threshold: f64,
    pub unrolled_threshold: f64,
    /// Unrolled depths; the last is compared against the threshold.
    pub depths: Vec<usize>,
    /// Negate the implicit gradients before comparison (fault injection).
    pub sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coords: 3,
            step: 1e-6,
            tolerance: 1e-10,
            fd_threshold: 1e-4,
            unrolled_threshold: 1e-3,
            depths: vec![5, 10, 20, 50],
            sign_flip: false,
        }
    }
}

/// The verification model: two scales of [4, 8] channels with a damped
/// post-fusion norm, so that plain unrolling converges too.
pub fn grad_check_model() -> ModelConfig {
    ModelConfig {
        fusion_gamma: 0.1,
        ..ModelConfig::tiny()
    }
}

/// Parameters, a 2×3×8×8 batch and labels for `seed`.
pub fn grad_check_instance(seed: u64) -> Result<(ModelConfig, MdeqParams<f64>, Tensor<f64>, Targets)> {
    let model = grad_check_model();
    let params = init_params::<f64>(&model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random::<f64>() - 0.5);
    let labels = (0..2).map(|_| rng.random_range(0..model.num_classes)).collect();
    let targets = Targets {
        classes: Some(labels),
        dense: None,
    };
    Ok((model, params, images, targets))
}

/// Worst errors for one parameter tensor, each relative to the largest
/// implicit-gradient magnitude in that tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub fd: f64,
    pub unrolled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    /// Worst unrolled-vs-implicit error at each depth.
    pub depth_errors: Vec<(usize, f64)>,
    pub max_fd: f64,
    pub max_unrolled: f64,
    pub fd_threshold: f64,
    pub unrolled_threshold: f64,
    pub monotone: bool,
}

impl GradCheckReport {
    pub fn fd_pass(&self) -> bool {
        self.max_fd < self.fd_threshold
    }

    pub fn unrolled_pass(&self) -> bool {
        self.max_unrolled < self.unrolled_threshold
    }

    pub fn pass(&self) -> bool {
        self.fd_pass() && self.unrolled_pass() && self.monotone
    }

    pub fn groups_csv(&self) -> String {
        let mut s = String::from("group,fd_error,unrolled_error\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{:e},{:e}", g.name, g.fd, g.unrolled);
        }
        s
    }

    pub fn depths_csv(&self) -> String {
        let mut s = String::from("depth,max_rel_error\n");
        for (d, e) in &self.depth_errors {
            let _ = writeln!(s, "{d},{e:e}");
        }
        s
    }

    pub fn summary(&self) -> String {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "implicit vs finite differences: max rel error {:.3e} (threshold {:e}) {}",
            self.max_fd,
            self.fd_threshold,
            verdict(self.fd_pass())
        );
        let _ = writeln!(
            s,
            "implicit vs unrolled: max rel error {:.3e} (threshold {:e}) {}",
            self.max_unrolled,
            self.unrolled_threshold,
            verdict(self.unrolled_pass())
        );
        let depths: Vec<String> = self.depth_errors.iter().map(|(d, e)| format!("{d}:{e:.2e}")).collect();
        let _ = writeln!(
            s,
            "unrolled error by depth {} {}",
            depths.join(" "),
            if self.monotone { "decreasing" } else { "NOT decreasing" }
        );
        let _ = writeln!(s, "{}", verdict(self.pass()));
        s
    }
}

fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>, scale: f64) -> Result<f64> {
    Ok(a.max_abs_diff(b)? / scale)
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, params, images, targets) = grad_check_instance(cfg.seed)?;
    let mask = DropoutMask::identity();
    let act = Activation::Softplus {
        beta: model.softplus_beta,
    };
    let solver = SolverConfig::new(cfg.tolerance, 300, 300)?;
    let implicit = forward_backward(
        &params,
        &model,
        &images,
        &targets,
        &mask,
        act,
        Mode::Implicit {
            forward: solver,
            backward: solver,
        },
    )?;
    let mut grads = implicit.grads;
    if cfg.sign_flip {
        for p in grads.iter_mut().filter(|p| !p.name.starts_with("head.")) {
            p.value = p.value.scale(-1.0);
        }
    }
    let scale = |name: &str| grads.get(name).map_or(1.0, |g| g.max_abs().max(1e-12));

    let mut depth_errors = Vec::with_capacity(cfg.depths.len());
    let mut deepest: Option<MdeqParams<f64>> = None;
    for &depth in &cfg.depths {
        let un = forward_backward(&params, &model, &images, &targets, &mask, act, Mode::Unrolled { depth })?;
        let mut worst: f64 = 0.0;
        for p in grads.iter() {
            let other = un.grads.require(&p.name)?;
            worst = worst.max(rel_error(&p.value, other, scale(&p.name))?);
        }
        depth_errors.push((depth, worst));
        deepest = Some(un.grads);
    }
    let monotone = depth_errors.windows(2).all(|w| w[1].1 < w[0].1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFD);
    let mut groups = Vec::with_capacity(params.len());
    for p in params.iter() {
        let g = grads.require(&p.name)?;
        let s = scale(&p.name);
        let mut fd_worst: f64 = 0.0;
        let n = p.value.len();
        let picks: Vec<usize> = if n <= cfg.coords {
            (0..n).collect()
        } else {
            (0..cfg.coords).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let mut perturbed = params.clone();
            let slot = &mut perturbed.get_mut(&p.name).expect("own parameter").data_mut()[k];
            let orig = *slot;
            *slot = orig + cfg.step;
            let plus = loss_value(&perturbed, &model, &images, &targets, &mask, act, &solver)?;
            perturbed.get_mut(&p.name).expect("own parameter").data_mut()[k] = orig - cfg.step;
            let minus = loss_value(&perturbed, &model, &images, &targets, &mask, act, &solver)?;
            let fd = (plus - minus) / (2.0 * cfg.step);
            fd_worst = fd_worst.max((g.data()[k] - fd).abs() / s);
        }
        let unrolled = match &deepest {
            Some(d) => rel_error(g, d.require(&p.name)?, s)?,
            None => f64::NAN,
        };
        groups.push(GroupError {
            name: p.name.clone(),
            fd: fd_worst,
            unrolled,
        });
    }
    let max_fd = groups.iter().map(|g| g.fd).fold(0.0, f64::max);
    let max_unrolled = depth_errors.last().map_or(f64::INFINITY, |d| d.1);
    Ok(GradCheckReport {
        groups,
        depth_errors,
        max_fd,
        max_unrolled,
        fd_threshold: cfg.fd_threshold,
        unrolled_threshold: cfg.unrolled_threshold,
        monotone,
    })
}
