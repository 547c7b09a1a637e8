//! The training loop: unrolled warm-up, then implicit training, with
//! per-step logging, per-epoch evaluation and checkpoints.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{init_params, Activation, DropoutMask, MdeqParams, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::checkpoint::{self, Checkpoint, CheckpointHeader};
use super::config::RunConfig;
use super::data::Dataset;
use super::metrics::{cross_entropy, predictions, Confusion};
use super::optim::Optimizer;
use super::schedule::cosine_lr;
use super::step::{forward_backward, infer, Mode, StepOutput, Targets};

/// Header of the per-step metrics log.
pub const METRICS_HEADER: &str = "epoch,step,loss,metric,fwd_evals,bwd_evals,lr";
/// Header of the per-epoch summary log.
pub const EPOCHS_HEADER: &str =
    "epoch,phase,train_loss,eval_loss,eval_accuracy,eval_miou,mean_fwd_evals,mean_bwd_evals,skipped,flagged";
/// Fraction of skipped steps in an epoch above which the run is flagged.
pub const SKIP_FLAG_FRACTION: f64 = 0.01;

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Batch accuracy, or batch mIoU when only the dense head is trained.
    pub metric: f64,
    pub fwd_evals: usize,
    pub bwd_evals: usize,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.loss, self.metric, self.fwd_evals, self.bwd_evals, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Summed head losses, each averaged over the dataset.
    pub loss: f64,
    pub class_loss: Option<f64>,
    pub dense_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    /// mIoU of predicting the most frequent dense class everywhere.
    pub majority_miou: Option<f64>,
    pub mean_fwd_evals: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub phase: &'static str,
    pub train_loss: f64,
    pub eval: Option<EvalMetrics>,
    pub mean_fwd_evals: f64,
    pub mean_bwd_evals: f64,
    pub steps: usize,
    pub skipped: usize,
    pub flagged: bool,
}

impl EpochSummary {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.train_loss,
            opt(self.eval.as_ref().map(|e| e.loss)),
            opt(self.eval.as_ref().and_then(|e| e.accuracy)),
            opt(self.eval.as_ref().and_then(|e| e.miou)),
            self.mean_fwd_evals,
            self.mean_bwd_evals,
            self.skipped,
            self.flagged
        )
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub fn flagged(&self) -> bool {
        self.epochs.iter().any(|e| e.flagged)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }
}

/// Fails unless the dataset's geometry and labels fit the model.
pub fn check_geometry(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let fail = |m: String| Err(Error::Config(m));
    if data.channels != model.input_channels {
        return fail(format!(
            "dataset has {} channels, model expects {}",
            data.channels, model.input_channels
        ));
    }
    let factor = 1usize << (model.num_downsamples + model.n_scales() - 1);
    if !data.height.is_multiple_of(factor) || !data.width.is_multiple_of(factor) {
        return fail(format!(
            "{}×{} images are not divisible by {factor}",
            data.height, data.width
        ));
    }
    if model.num_classes > 0 && data.num_classes > model.num_classes {
        return fail(format!(
            "dataset has {} classes, head has {}",
            data.num_classes, model.num_classes
        ));
    }
    if model.seg_classes > 0 {
        match &data.dense {
            None => return fail("segmentation head needs dense labels".into()),
            Some(d) if d.iter().any(|&l| l >= model.seg_classes) => {
                return fail("dense label exceeds the segmentation classes".into())
            }
            Some(_) => {}
        }
    }
    if model.num_classes == 0 && model.seg_classes == 0 {
        return fail("model has no head".into());
    }
    Ok(())
}

/// Drops targets for heads the model does not have.
pub fn restrict_targets(model: &ModelConfig, t: Targets) -> Targets {
    Targets {
        classes: t.classes.filter(|_| model.num_classes > 0),
        dense: t.dense.filter(|_| model.seg_classes > 0),
    }
}

fn slice_targets(t: &Targets, range: std::ops::Range<usize>, plane: usize) -> Targets {
    Targets {
        classes: t.classes.as_ref().map(|c| c[range.clone()].to_vec()),
        dense: t.dense.as_ref().map(|d| d[range.start * plane..range.end * plane].to_vec()),
    }
}

/// Contiguous, near-equal shards of `0..n`.
fn shards(n: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    let k = threads.clamp(1, n.max(1));
    (0..k).map(|i| i * n / k..(i + 1) * n / k).filter(|r| !r.is_empty()).collect()
}

fn concat_opt<T: Scalar>(parts: Vec<Option<Tensor<T>>>) -> Result<Option<Tensor<T>>> {
    let parts: Option<Vec<Tensor<T>>> = parts.into_iter().collect();
    parts.map(|p| Tensor::concat_batch(&p)).transpose()
}

/// [`forward_backward`] with the batch split over `threads` workers; losses and
/// gradients are combined with weights proportional to shard size.
#[allow(clippy::too_many_arguments)]
pub fn sharded_step<T: Scalar>(
    params: &MdeqParams<T>,
    model: &ModelConfig,
    images: &Tensor<T>,
    targets: &Targets,
    mask: &DropoutMask<T>,
    act: Activation,
    mode: Mode,
    threads: usize,
) -> Result<StepOutput<T>> {
    let (n, _, h, w) = images.dims4("sharded_step")?;
    let ranges = shards(n, threads);
    if ranges.len() <= 1 {
        return forward_backward(params, model, images, targets, mask, act, mode);
    }
    let outputs: Vec<Result<StepOutput<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|r| {
                let r = r.clone();
                s.spawn(move || {
                    let imgs = images.slice_batch(r.clone())?;
                    let tg = slice_targets(targets, r.clone(), h * w);
                    let m = mask.slice_batch(r)?;
                    forward_backward(params, model, &imgs, &tg, &m, act, mode)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut grads = params.zeros_like();
    let mut combined = StepOutput {
        loss: 0.0,
        class_loss: None,
        dense_loss: None,
        grads: params.zeros_like(),
        fwd_evals: 0,
        bwd_evals: 0,
        solver_vectors: 0,
        forward_trace: None,
        backward_trace: None,
        stale: false,
        invocations: Vec::new(),
        class_logits: None,
        dense_logits: None,
    };
    let mut class_logits = Vec::new();
    let mut dense_logits = Vec::new();
    for (out, r) in outputs.into_iter().zip(&ranges) {
        let wgt = r.len() as f64 / n as f64;
        combined.loss += wgt * out.loss;
        combined.class_loss = out.class_loss.map(|l| combined.class_loss.unwrap_or(0.0) + wgt * l);
        combined.dense_loss = out.dense_loss.map(|l| combined.dense_loss.unwrap_or(0.0) + wgt * l);
        combined.fwd_evals = combined.fwd_evals.max(out.fwd_evals);
        combined.bwd_evals = combined.bwd_evals.max(out.bwd_evals);
        combined.solver_vectors += out.solver_vectors;
        combined.stale |= out.stale;
        combined.invocations.extend(out.invocations);
        let tw = T::from_f64_lossy(wgt);
        for (acc, g) in grads.iter_mut().zip(out.grads.iter()) {
            acc.value.add_assign(&g.value.scale(tw))?;
        }
        class_logits.push(out.class_logits);
        dense_logits.push(out.dense_logits);
    }
    combined.grads = grads;
    combined.class_logits = concat_opt(class_logits)?;
    combined.dense_logits = concat_opt(dense_logits)?;
    Ok(combined)
}

fn all_finite<T: Scalar>(p: &MdeqParams<T>) -> bool {
    p.iter().all(|e| e.value.all_finite())
}

/// Top-1 accuracy and/or mIoU on `data` with the identity mask and the
/// forward solver settings of `cfg`.
pub fn evaluate<T: Scalar>(
    params: &MdeqParams<T>,
    cfg: &RunConfig,
    data: &Dataset,
    act: Activation,
    threads: usize,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    check_geometry(&cfg.model, data)?;
    let model = &cfg.model;
    let bs = cfg.train.batch_size.max(1);
    let mask = DropoutMask::identity();
    let batches: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(bs)
        .map(<[usize]>::to_vec)
        .collect();

    struct Part<T> {
        n: usize,
        class: Option<(f64, Vec<usize>, Vec<usize>)>,
        dense: Option<(f64, Vec<usize>, Vec<usize>)>,
        fwd: usize,
        _t: std::marker::PhantomData<T>,
    }
    let run = |idx: &[usize]| -> Result<Part<T>> {
        let (images, targets) = data.batch::<T>(idx, &cfg.data.mean, &cfg.data.std, None)?;
        let targets = restrict_targets(model, targets);
        let inf = infer(params, model, &images, &mask, act, &cfg.solver_fwd)?;
        let class = match (&inf.class_logits, targets.classes) {
            (Some(l), Some(t)) => Some((cross_entropy(l, &t)?, t, predictions(l)?)),
            _ => None,
        };
        let dense = match (&inf.dense_logits, targets.dense) {
            (Some(l), Some(t)) => Some((cross_entropy(l, &t)?, t, predictions(l)?)),
            _ => None,
        };
        Ok(Part {
            n: idx.len(),
            class,
            dense,
            fwd: inf.trace.f_evals(),
            _t: std::marker::PhantomData,
        })
    };
    let parts: Vec<Part<T>> = if threads <= 1 {
        batches.iter().map(|b| run(b)).collect::<Result<_>>()?
    } else {
        let groups = shards(batches.len(), threads);
        let per_group: Vec<Result<Vec<Part<T>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .iter()
                .map(|g| {
                    let chunk = &batches[g.clone()];
                    let run = &run;
                    s.spawn(move || chunk.iter().map(|b| run(b)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        });
        let mut all = Vec::new();
        for g in per_group {
            all.extend(g?);
        }
        all
    };

    let n = data.len() as f64;
    let mut class_conf = (model.num_classes > 0).then(|| Confusion::new(model.num_classes));
    let mut dense_conf = (model.seg_classes > 0).then(|| Confusion::new(model.seg_classes));
    let mut class_loss = 0.0;
    let mut dense_loss = 0.0;
    let mut fwd = 0usize;
    for p in &parts {
        let wgt = p.n as f64 / n;
        if let (Some((l, t, pr)), Some(c)) = (&p.class, &mut class_conf) {
            class_loss += wgt * l;
            c.add(t, pr)?;
        }
        if let (Some((l, t, pr)), Some(c)) = (&p.dense, &mut dense_conf) {
            dense_loss += wgt * l;
            c.add(t, pr)?;
        }
        fwd += p.fwd;
    }
    let majority_miou = dense_conf.as_ref().map(|c| {
        let k = c.classes;
        let row = |i: usize| (0..k).map(|j| c.counts[i * k + j]).sum::<u64>();
        let top = (0..k).max_by_key(|&i| (row(i), std::cmp::Reverse(i))).unwrap_or(0);
        let mut m = Confusion::new(k);
        for i in 0..k {
            m.counts[i * k + top] = row(i);
        }
        m.mean_iou()
    });
    let class_loss = class_conf.as_ref().map(|_| class_loss);
    let dense_loss = dense_conf.as_ref().map(|_| dense_loss);
    Ok(EvalMetrics {
        loss: class_loss.unwrap_or(0.0) + dense_loss.unwrap_or(0.0),
        class_loss,
        dense_loss,
        accuracy: class_conf.as_ref().map(Confusion::accuracy),
        miou: dense_conf.as_ref().map(Confusion::mean_iou),
        majority_miou,
        mean_fwd_evals: fwd as f64 / parts.len() as f64,
        samples: data.len(),
    })
}

/// Stateful trainer over one run configuration.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub params: MdeqParams<T>,
    pub optimizer: Optimizer<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub threads: usize,
    pub out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params::<T>(&config.model, config.train.seed)?;
        let optimizer = Optimizer::new(&params, &config.train);
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: 0,
            threads: 1,
            out_dir: None,
        })
    }

    /// Continues from a checkpoint written for the same model.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        ckpt.check_fingerprint(t.config.model_fingerprint())?;
        ckpt.restore_params(&mut t.params)?;
        ckpt.restore_optimizer(&mut t.optimizer)?;
        t.epoch = ckpt.header.epoch as usize;
        Ok(t)
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Write logs and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Activation used during `epoch` (0-based).
    pub fn activation(&self, epoch: usize) -> Activation {
        if epoch < self.config.train.softplus_epochs {
            Activation::Softplus {
                beta: self.config.model.softplus_beta,
            }
        } else {
            Activation::Relu
        }
    }

    pub fn mode(&self, epoch: usize) -> Mode {
        if epoch < self.config.train.warmup_epochs {
            Mode::Unrolled {
                depth: self.config.train.warmup_depth,
            }
        } else {
            Mode::Implicit {
                forward: self.config.solver_fwd,
                backward: self.config.solver_bwd,
            }
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        let full = train_len.div_ceil(self.config.train.batch_size.max(1));
        match self.config.train.max_steps {
            0 => full,
            cap => full.min(cap),
        }
    }

    pub fn evaluate(&self, data: &Dataset, act: Activation) -> Result<EvalMetrics> {
        evaluate(&self.params, &self.config, data, act, self.threads)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            epoch: self.epoch as u32,
            fingerprint: self.config.model_fingerprint(),
            opt_step: self.optimizer.step,
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self.header(), &self.params, Some(&self.optimizer))
    }

    fn append(&self, file: &str, header: &str, rows: &[String]) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join(file);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "{header}")?;
        }
        for r in rows {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }

    /// Trains one epoch, evaluates on `test` and writes logs and a checkpoint.
    pub fn run_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<(EpochSummary, Vec<StepRecord>)> {
        check_geometry(&self.config.model, train)?;
        if train.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let tc = self.config.train.clone();
        let epoch = self.epoch;
        let steps = self.steps_per_epoch(train.len());
        let total = tc.epochs * steps;
        let act = self.activation(epoch);
        let mode = self.mode(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(tc.seed, epoch as u64)));

        let mut records = Vec::with_capacity(steps);
        let mut skipped = 0;
        let (mut loss_sum, mut fwd_sum, mut bwd_sum) = (0.0, 0usize, 0usize);
        for s in 0..steps {
            let global = epoch * steps + s;
            let lr = if tc.cosine {
                cosine_lr(global.min(total), total, tc.lr0, tc.lr_min)?
            } else {
                tc.lr0
            };
            let end = ((s + 1) * tc.batch_size).min(order.len());
            let idx = &order[s * tc.batch_size..end];
            let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(tc.seed ^ 0xA5A5, global as u64));
            let (images, targets) = train.batch::<T>(
                idx,
                &self.config.data.mean,
                &self.config.data.std,
                tc.augment.then_some(&mut aug_rng),
            )?;
            let targets = restrict_targets(&self.config.model, targets);
            let mask = DropoutMask::sample(
                self.config.model.dropout_rate,
                idx.len(),
                &self.config.model.channels,
                mix(tc.seed, global as u64 + 1),
            )?;
            let out = match sharded_step(
                &self.params,
                &self.config.model,
                &images,
                &targets,
                &mask,
                act,
                mode,
                self.threads,
            ) {
                Ok(out) if out.loss.is_finite() && all_finite(&out.grads) => out,
                Ok(_) => {
                    skipped += 1;
                    continue;
                }
                Err(e) if e.is_numerical() => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.optimizer.update(&mut self.params, &out.grads, lr)?;
            let metric = match (&out.class_logits, &targets.classes, &out.dense_logits, &targets.dense) {
                (Some(l), Some(t), _, _) => {
                    let mut c = Confusion::new(self.config.model.num_classes);
                    c.add(t, &predictions(l)?)?;
                    c.accuracy()
                }
                (_, _, Some(l), Some(t)) => {
                    let mut c = Confusion::new(self.config.model.seg_classes);
                    c.add(t, &predictions(l)?)?;
                    c.mean_iou()
                }
                _ => f64::NAN,
            };
            loss_sum += out.loss;
            fwd_sum += out.fwd_evals;
            bwd_sum += out.bwd_evals;
            records.push(StepRecord {
                epoch,
                step: global,
                loss: out.loss,
                metric,
                fwd_evals: out.fwd_evals,
                bwd_evals: out.bwd_evals,
                lr,
            });
        }
        self.epoch += 1;
        let done = records.len().max(1) as f64;
        let eval = test.map(|t| self.evaluate(t, act)).transpose()?;
        let summary = EpochSummary {
            epoch,
            phase: if matches!(mode, Mode::Unrolled { .. }) { "unrolled" } else { "implicit" },
            train_loss: loss_sum / done,
            eval,
            mean_fwd_evals: fwd_sum as f64 / done,
            mean_bwd_evals: bwd_sum as f64 / done,
            steps: records.len(),
            skipped,
            flagged: skipped as f64 > SKIP_FLAG_FRACTION * steps as f64,
        };
        self.append("metrics.csv", METRICS_HEADER, &records.iter().map(StepRecord::csv_row).collect::<Vec<_>>())?;
        self.append("epochs.csv", EPOCHS_HEADER, &[summary.csv_row()])?;
        if let Some(dir) = &self.out_dir {
            checkpoint::save(&dir.join("checkpoint.mdeq"), self.header(), &self.params, Some(&self.optimizer))?;
        }
        Ok((summary, records))
    }

    /// Runs the remaining epochs of the configuration.
    pub fn fit(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.epoch < self.config.train.epochs {
            let (summary, records) = self.run_epoch(train, test)?;
            report.steps.extend(records);
            report.epochs.push(summary);
        }
        Ok(report)
    }
}
