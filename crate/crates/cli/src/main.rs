//! `mdeq`: training, evaluation and diagnostics for multiscale deep equilibrium models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdeq::cell::{init_params, Activation, MdeqParams};
use mdeq::diag::{self, GradCheckConfig};
use mdeq::train::checkpoint::{self, Checkpoint};
use mdeq::train::{self, load_datasets, restrict_targets, RunConfig, Trainer};
use mdeq::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "mdeq", version, about = "Multiscale deep equilibrium models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv, epochs.csv, checkpoint.mdeq and config.txt.
    Train(Common),
    /// Evaluate a checkpoint on the test split; writes eval.csv.
    Eval(Common),
    /// Compare implicit, finite-difference and unrolled gradients; writes grad_check.csv.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Negate the implicit gradients before comparing (the check must then fail).
        #[arg(long, hide = true)]
        fault_sign_flip: bool,
    },
    /// Broyden vs naive residual traces; writes converge.csv.
    Converge(Common),
    /// Retained tapes and solver vectors per setting; writes mem_audit.csv.
    MemAudit(Common),
    /// Solver test-function suite; writes solver_bench.csv.
    SolverBench(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed; replaces `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch-sharded train/eval.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to evaluate, analyze, or resume training from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("train.seed", &seed.to_string())?;
        }
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn load_checkpoint(&self, cfg: &RunConfig) -> Result<Option<Checkpoint>> {
        let Some(path) = &self.checkpoint else {
            return Ok(None);
        };
        let ckpt = checkpoint::load(path)?;
        ckpt.check_fingerprint(cfg.model_fingerprint())?;
        Ok(Some(ckpt))
    }

    /// Checkpointed parameters if given, fresh ones from the seed otherwise.
    fn params(&self, cfg: &RunConfig) -> Result<(MdeqParams<f32>, usize)> {
        let mut params = init_params::<f32>(&cfg.model, cfg.train.seed)?;
        match self.load_checkpoint(cfg)? {
            Some(ckpt) => {
                ckpt.restore_params(&mut params)?;
                Ok((params, ckpt.header.epoch as usize))
            }
            None => Ok((params, 0)),
        }
    }
}

/// Activation of the last of `epochs` completed epochs (of the first when none are).
fn activation_after(cfg: &RunConfig, epochs: usize) -> Activation {
    if epochs.saturating_sub(1) < cfg.train.softplus_epochs {
        Activation::Softplus {
            beta: cfg.model.softplus_beta,
        }
    } else {
        Activation::Relu
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    eprintln!("wrote {}", dir.join(name).display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Outcome of a command that ran to completion.
enum Verdict {
    Pass,
    Fail,
}

fn cmd_train(c: &Common) -> Result<Verdict> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let (train_set, test_set) = load_datasets(&cfg.data)?;
    let mut trainer = match c.load_checkpoint(&cfg)? {
        Some(ckpt) => Trainer::<f32>::resume(cfg.clone(), &ckpt)?,
        None => {
            for f in ["metrics.csv", "epochs.csv"] {
                let p = out.join(f);
                if p.exists() {
                    std::fs::remove_file(p)?;
                }
            }
            Trainer::<f32>::new(cfg.clone())?
        }
    }
    .with_threads(c.threads)
    .with_output(out)?;
    write(out, "config.txt", &cfg.to_text())?;
    eprintln!(
        "training {} parameters on {} images ({} test)",
        trainer.params.count(),
        train_set.len(),
        test_set.len()
    );
    let test = (!test_set.is_empty()).then_some(&test_set);
    let mut flagged = false;
    while trainer.epoch < cfg.train.epochs {
        let (s, _) = trainer.run_epoch(&train_set, test)?;
        flagged |= s.flagged;
        eprintln!(
            "epoch {} [{}] train loss {:.4} eval loss {} acc {} mIoU {} fwd {:.1} bwd {:.1} skipped {}",
            s.epoch,
            s.phase,
            s.train_loss,
            opt(s.eval.as_ref().map(|e| e.loss)),
            opt(s.eval.as_ref().and_then(|e| e.accuracy)),
            opt(s.eval.as_ref().and_then(|e| e.miou)),
            s.mean_fwd_evals,
            s.mean_bwd_evals,
            s.skipped
        );
    }
    if flagged {
        eprintln!("warning: more than 1% of steps were skipped in at least one epoch");
    }
    Ok(Verdict::Pass)
}

fn cmd_eval(c: &Common) -> Result<Verdict> {
    let cfg = c.config()?;
    if c.checkpoint.is_none() {
        return Err(Error::Config("eval needs --checkpoint".into()));
    }
    let out = c.out_dir()?;
    let (params, epochs) = c.params(&cfg)?;
    let (_, test_set) = load_datasets(&cfg.data)?;
    let m = train::evaluate(&params, &cfg, &test_set, activation_after(&cfg, epochs), c.threads)?;
    let csv = format!(
        "samples,loss,accuracy,miou,mean_fwd_evals\n{},{},{},{},{}\n",
        m.samples,
        m.loss,
        opt(m.accuracy),
        opt(m.miou),
        m.mean_fwd_evals
    );
    write(out, "eval.csv", &csv)?;
    print!("{csv}");
    Ok(Verdict::Pass)
}

fn cmd_grad_check(c: &Common, sign_flip: bool) -> Result<Verdict> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let gc = GradCheckConfig {
        seed: cfg.train.seed,
        coords: cfg.diag.grad_coords,
        sign_flip,
        ..GradCheckConfig::default()
    };
    let report = diag::grad_check(&gc)?;
    write(out, "grad_check.csv", &report.groups_csv())?;
    write(out, "grad_check_depths.csv", &report.depths_csv())?;
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.fd.total_cmp(&b.fd))
        .map(|g| g.name.clone())
        .unwrap_or_default();
    println!("worst finite-difference group: {worst}");
    print!("{}", report.summary());
    Ok(if report.pass() { Verdict::Pass } else { Verdict::Fail })
}

fn diag_activation(cfg: &RunConfig) -> Activation {
    if cfg.diag.softplus {
        Activation::Softplus {
            beta: cfg.model.softplus_beta,
        }
    } else {
        Activation::Relu
    }
}

/// The first `diag.batches` batches of `diag.batch_size` test images, with targets.
fn diag_batches(cfg: &RunConfig) -> Result<Vec<(Tensor<f32>, train::Targets)>> {
    let (_, test_set) = load_datasets(&cfg.data)?;
    train::check_geometry(&cfg.model, &test_set)?;
    let need = cfg.diag.batches * cfg.diag.batch_size;
    if test_set.len() < need {
        return Err(Error::Config(format!(
            "diagnostics need {need} test images, the test split has {}",
            test_set.len()
        )));
    }
    (0..cfg.diag.batches)
        .map(|b| {
            let idx: Vec<usize> = (b * cfg.diag.batch_size..(b + 1) * cfg.diag.batch_size).collect();
            let (x, t) = test_set.batch::<f32>(&idx, &cfg.data.mean, &cfg.data.std, None)?;
            Ok((x, restrict_targets(&cfg.model, t)))
        })
        .collect()
}

fn cmd_converge(c: &Common) -> Result<Verdict> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let (params, _) = c.params(&cfg)?;
    let params = params.cast::<f64>();
    let batches: Vec<Tensor<f64>> = diag_batches(&cfg)?.into_iter().map(|(x, _)| x.cast()).collect();
    let report = diag::converge(
        &params,
        &cfg.model,
        &batches,
        cfg.diag.budget,
        cfg.solver_fwd.memory,
        cfg.solver_fwd.epsilon,
        diag_activation(&cfg),
    )?;
    write(out, "converge.csv", &report.csv())?;
    println!(
        "broyden residual <= naive in {}/{} batches at {} f-evaluations",
        report.broyden_wins(),
        report.batches.len(),
        cfg.diag.budget
    );
    println!(
        "all scales below {:e} at termination in {}/{} batches",
        report.tolerance,
        report.all_scales_converged(),
        report.batches.len()
    );
    for b in &report.batches {
        let evals: Vec<String> = b
            .scale_evals_to_tolerance
            .iter()
            .map(|e| e.map_or("-".into(), |v| v.to_string()))
            .collect();
        println!(
            "batch {}: broyden {:.3e} naive {:.3e} per-scale evals to tolerance [{}]",
            b.batch,
            b.broyden_best,
            b.naive_best,
            evals.join(",")
        );
    }
    Ok(Verdict::Pass)
}

fn cmd_mem_audit(c: &Common) -> Result<Verdict> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let (params, _) = c.params(&cfg)?;
    let (images, targets) = diag_batches(&cfg)?.into_iter().next().expect("at least one batch");
    let rows = diag::mem_audit(
        &params,
        &cfg.model,
        &images,
        &targets,
        cfg.solver_bwd,
        cfg.solver_fwd.memory,
        &[5, 10, 20, 30],
        diag_activation(&cfg),
    )?;
    let csv = diag::mem_csv(&rows);
    write(out, "mem_audit.csv", &csv)?;
    print!("{csv}");
    Ok(Verdict::Pass)
}

fn cmd_solver_bench(c: &Common) -> Result<Verdict> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let s = cfg.train.seed;
    let rows = diag::solver_bench(&[s, s + 1, s + 2], cfg.solver_fwd.memory)?;
    let csv = diag::bench_csv(&rows);
    write(out, "solver_bench.csv", &csv)?;
    print!("{csv}");
    Ok(Verdict::Pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::GradCheck { common, fault_sign_flip } => cmd_grad_check(common, *fault_sign_flip),
        Command::Converge(c) => cmd_converge(c),
        Command::MemAudit(c) => cmd_mem_audit(c),
        Command::SolverBench(c) => cmd_solver_bench(c),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
