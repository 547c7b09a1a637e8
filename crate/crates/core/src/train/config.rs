//! Run configuration: a flat `key = value` text file with namespaced keys.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated (`model.channels = 8,16,32`). Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cell::ModelConfig;
use crate::error::{Error, Result};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub cosine: bool,
    /// Epochs trained with the unrolled stack before switching to the solver.
    pub warmup_epochs: usize,
    pub warmup_depth: usize,
    /// Epochs using softplus in place of the closing ReLUs.
    pub softplus_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Stop each epoch after this many steps; 0 means the whole dataset.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            lr0: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.0,
            momentum: 0.9,
            nesterov: true,
            cosine: true,
            warmup_epochs: 2,
            warmup_depth: 5,
            softplus_epochs: 2,
            seed: 0,
            augment: false,
            max_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: String,
    /// Use only the first `n` records of each split; 0 means all.
    pub train_subset: usize,
    pub test_subset: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Side length of synthetic images.
    pub image_size: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Attach dense labels to synthetic data.
    pub dense: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Cifar10,
            path: "data/cifar-10-batches-bin".into(),
            train_subset: 0,
            test_subset: 0,
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
            image_size: 16,
            synthetic_train: 512,
            synthetic_test: 128,
            dense: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagConfig {
    pub batches: usize,
    pub batch_size: usize,
    /// f-evaluation budget for solver comparisons.
    pub budget: usize,
    /// Sampled coordinates per parameter tensor in gradient checks.
    pub grad_coords: usize,
    /// Use softplus instead of ReLU in convergence and memory diagnostics.
    pub softplus: bool,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            batches: 5,
            batch_size: 4,
            budget: 30,
            grad_coords: 3,
            softplus: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub solver_fwd: SolverConfig,
    pub solver_bwd: SolverConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub diag: DiagConfig,
}

impl Default for RunConfig {
    /// CIFAR-10 MDEQ-small.
    fn default() -> Self {
        Self {
            model: ModelConfig::cifar_small(),
            solver_fwd: SolverConfig {
                epsilon: 1e-3,
                max_iters: 15,
                memory: 12,
                alpha: 1.0,
            },
            solver_bwd: SolverConfig {
                epsilon: 1e-3,
                max_iters: 18,
                memory: 12,
                alpha: 1.0,
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            diag: DiagConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn set_solver(cfg: &mut SolverConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "max_iters" => cfg.max_iters = parse(key, value)?,
        "epsilon" => cfg.epsilon = parse(key, value)?,
        "memory" => cfg.memory = parse(key, value)?,
        "alpha" => cfg.alpha = parse(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key}"))),
    }
    Ok(())
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut n_scales = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "model.n_scales" {
                n_scales = Some(parse::<usize>(k, v)?);
            } else {
                cfg.set(k, v)?;
            }
        }
        if let Some(n) = n_scales {
            cfg.set("model.n_scales", &n.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Sets one key. `model.n_scales` only checks consistency with the channel list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.n_scales" => {
                let n: usize = parse(key, value)?;
                if n != m.channels.len() {
                    return Err(Error::Config(format!(
                        "model.n_scales = {n} but model.channels lists {} scales",
                        m.channels.len()
                    )));
                }
            }
            "model.channels" => m.channels = parse_list(key, value)?,
            "model.expansion" => m.expansion = parse(key, value)?,
            "model.gn_groups" => m.gn_groups = parse(key, value)?,
            "model.dropout_rate" => m.dropout_rate = parse(key, value)?,
            "model.num_downsamples" => m.num_downsamples = parse(key, value)?,
            "model.softplus_beta" => m.softplus_beta = parse(key, value)?,
            "model.input_channels" => m.input_channels = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.head_channels" => m.head_channels = parse_list(key, value)?,
            "model.final_channels" => m.final_channels = parse(key, value)?,
            "model.seg_classes" => m.seg_classes = parse(key, value)?,
            "model.init_std" => m.init_std = parse(key, value)?,
            "model.fusion_gamma" => m.fusion_gamma = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.optimizer" => {
                t.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("{key}: expected adam or sgd"))),
                }
            }
            "train.lr0" => t.lr0 = parse(key, value)?,
            "train.lr_min" => t.lr_min = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.nesterov" => t.nesterov = parse_bool(key, value)?,
            "train.cosine" => t.cosine = parse_bool(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.warmup_depth" => t.warmup_depth = parse(key, value)?,
            "train.softplus_epochs" => t.softplus_epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.augment" => t.augment = parse_bool(key, value)?,
            "train.max_steps" => t.max_steps = parse(key, value)?,
            "data.kind" => {
                d.kind = match value {
                    "cifar10" => DataKind::Cifar10,
                    "synthetic" => DataKind::Synthetic,
                    _ => return Err(Error::Config(format!("{key}: expected cifar10 or synthetic"))),
                }
            }
            "data.path" => d.path = value.to_string(),
            "data.train_subset" => d.train_subset = parse(key, value)?,
            "data.test_subset" => d.test_subset = parse(key, value)?,
            "data.mean" => d.mean = parse_list(key, value)?,
            "data.std" => d.std = parse_list(key, value)?,
            "data.image_size" => d.image_size = parse(key, value)?,
            "data.synthetic_train" => d.synthetic_train = parse(key, value)?,
            "data.synthetic_test" => d.synthetic_test = parse(key, value)?,
            "data.dense" => d.dense = parse_bool(key, value)?,
            "diag.batches" => self.diag.batches = parse(key, value)?,
            "diag.batch_size" => self.diag.batch_size = parse(key, value)?,
            "diag.budget" => self.diag.budget = parse(key, value)?,
            "diag.grad_coords" => self.diag.grad_coords = parse(key, value)?,
            "diag.softplus" => self.diag.softplus = parse_bool(key, value)?,
            _ => {
                if let Some(field) = key.strip_prefix("solver.fwd.") {
                    set_solver(&mut self.solver_fwd, key, field, value)?
                } else if let Some(field) = key.strip_prefix("solver.bwd.") {
                    set_solver(&mut self.solver_bwd, key, field, value)?
                } else {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.solver_fwd.validate()?;
        self.solver_bwd.validate()?;
        let t = &self.train;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if t.epochs == 0 || t.batch_size == 0 {
            return fail("train.epochs and train.batch_size must be positive");
        }
        if !(t.lr0 > 0.0) || t.lr_min < 0.0 || t.lr_min > t.lr0 {
            return fail("learning rates must satisfy 0 <= lr_min <= lr0, lr0 > 0");
        }
        if t.weight_decay < 0.0 || !(0.0..1.0).contains(&t.momentum) {
            return fail("weight_decay must be >= 0 and momentum in [0,1)");
        }
        if t.warmup_depth == 0 {
            return fail("train.warmup_depth must be at least 1");
        }
        let d = &self.data;
        if d.mean.len() != self.model.input_channels || d.std.len() != self.model.input_channels {
            return fail("data.mean and data.std need one entry per input channel");
        }
        if d.std.iter().any(|&s| !(s > 0.0)) {
            return fail("data.std entries must be positive");
        }
        if self.diag.batches == 0 || self.diag.batch_size == 0 || self.diag.budget == 0 {
            return fail("diag.batches, diag.batch_size and diag.budget must be positive");
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.n_scales", m.n_scales().to_string());
        put("model.channels", join(&m.channels));
        put("model.expansion", m.expansion.to_string());
        put("model.gn_groups", m.gn_groups.to_string());
        put("model.dropout_rate", m.dropout_rate.to_string());
        put("model.num_downsamples", m.num_downsamples.to_string());
        put("model.softplus_beta", m.softplus_beta.to_string());
        put("model.input_channels", m.input_channels.to_string());
        put("model.num_classes", m.num_classes.to_string());
        put("model.head_channels", join(&m.head_channels));
        put("model.final_channels", m.final_channels.to_string());
        put("model.seg_classes", m.seg_classes.to_string());
        put("model.init_std", m.init_std.to_string());
        put("model.fusion_gamma", m.fusion_gamma.to_string());
        for (prefix, c) in [("solver.fwd", &self.solver_fwd), ("solver.bwd", &self.solver_bwd)] {
            put(&format!("{prefix}.max_iters"), c.max_iters.to_string());
            put(&format!("{prefix}.epsilon"), c.epsilon.to_string());
            put(&format!("{prefix}.memory"), c.memory.to_string());
            put(&format!("{prefix}.alpha"), c.alpha.to_string());
        }
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put(
            "train.optimizer",
            match t.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        put("train.lr0", t.lr0.to_string());
        put("train.lr_min", t.lr_min.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.nesterov", t.nesterov.to_string());
        put("train.cosine", t.cosine.to_string());
        put("train.warmup_epochs", t.warmup_epochs.to_string());
        put("train.warmup_depth", t.warmup_depth.to_string());
        put("train.softplus_epochs", t.softplus_epochs.to_string());
        put("train.seed", t.seed.to_string());
        put("train.augment", t.augment.to_string());
        put("train.max_steps", t.max_steps.to_string());
        put(
            "data.kind",
            match d.kind {
                DataKind::Cifar10 => "cifar10",
                DataKind::Synthetic => "synthetic",
            }
            .into(),
        );
        put("data.path", d.path.clone());
        put("data.train_subset", d.train_subset.to_string());
        put("data.test_subset", d.test_subset.to_string());
        put("data.mean", join(&d.mean));
        put("data.std", join(&d.std));
        put("data.image_size", d.image_size.to_string());
        put("data.synthetic_train", d.synthetic_train.to_string());
        put("data.synthetic_test", d.synthetic_test.to_string());
        put("data.dense", d.dense.to_string());
        put("diag.batches", self.diag.batches.to_string());
        put("diag.batch_size", self.diag.batch_size.to_string());
        put("diag.budget", self.diag.budget.to_string());
        put("diag.grad_coords", self.diag.grad_coords.to_string());
        put("diag.softplus", self.diag.softplus.to_string());
        s
    }

    /// 64-bit FNV-1a hash of the model section, stored in checkpoints to
    /// reject weights trained for a different architecture.
    pub fn model_fingerprint(&self) -> u64 {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| l.starts_with("model.") && !l.starts_with("model.dropout_rate"))
            .collect::<Vec<_>>()
            .join("\n");
        fnv1a(text.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_text("model.chanels = 8,16").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["solver.fwd.memry=3"]).is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::from_text(
            "# small\nmodel.n_scales = 2\nmodel.channels = 4,8\nmodel.head_channels = 4,8\nsolver.fwd.max_iters = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.model.channels, vec![4, 8]);
        assert_eq!(cfg.solver_fwd.max_iters, 7);
        assert!(RunConfig::from_text("model.n_scales = 4").is_err());
    }
}
