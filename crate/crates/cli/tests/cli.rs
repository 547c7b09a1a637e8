//! Exit codes and artifacts of the `mdeq` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdeq(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdeq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    p.to_string_lossy().into_owned()
}

#[test]
fn solver_bench_succeeds_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = mdeq(&["solver-bench"], &dir.path().join("a"));
    let b = mdeq(&["solver-bench"], &dir.path().join("b"));
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = std::fs::read(dir.path().join("a/solver_bench.csv")).unwrap();
    assert_eq!(csv, std::fs::read(dir.path().join("b/solver_bench.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("case,solver,dim,seed,f_evals,termination,rel_residual,oracle_error\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 5);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn grad_check_passes_and_the_sign_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mdeq(&["grad-check"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(dir.path().join("grad_check.csv").exists());
    let bad = mdeq(&["grad-check", "--fault-sign-flip"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["solver-bench", "--set", "model.no_such_key=1"][..],
        &["solver-bench", "--set", "train.epochs=0"],
        &["solver-bench", "--config", "/nonexistent/run.cfg"],
        &["frobnicate"],
        &["eval"],
    ] {
        let out = mdeq(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn numerical_abort_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_dual.cfg");
    let out = mdeq(&["mem-audit", "--config", &cfg, "--set", "data.std=1e-300,1e-300,1e-300"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("synthetic_dual.cfg");
    let small = [
        "--config",
        &cfg,
        "--set",
        "data.synthetic_train=64",
        "--set",
        "data.synthetic_test=32",
        "--set",
        "train.epochs=1",
    ];
    let train: Vec<&str> = ["train"].iter().chain(small.iter()).copied().collect();
    let out = mdeq(&train, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("checkpoint.mdeq");
    assert!(ckpt.exists());
    let ckpt = ckpt.to_string_lossy().into_owned();

    let eval: Vec<&str> = ["eval", "--checkpoint", &ckpt].iter().chain(small.iter()).copied().collect();
    let out = mdeq(&eval, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(text.starts_with("samples,loss,accuracy,miou,mean_fwd_evals\n32,"));

    // A checkpoint from a different architecture is rejected.
    let mut other = eval.clone();
    other.extend(["--set", "model.channels=8,8"]);
    assert_eq!(mdeq(&other, dir.path()).status.code(), Some(1));
}
