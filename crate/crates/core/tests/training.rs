//! Data loading, optimizers, metrics, checkpoints and short training runs.

use mdeq::cell::{init_params, Activation, MdeqParams, ModelConfig, ParamKind};
use mdeq::train::checkpoint::{decode, CheckpointHeader};
use mdeq::train::metrics::Confusion;
use mdeq::train::{
    cosine_lr, evaluate, load_datasets, parse_cifar10, synthetic_task, Dataset, Optimizer, OptimizerKind, RunConfig,
    TrainConfig, Trainer,
};
use mdeq::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RECORD: usize = 3073;

fn cifar_fixture() -> Vec<u8> {
    let mut bytes = Vec::with_capacity(2 * RECORD);
    for (label, salt) in [(3u8, 0usize), (9u8, 101usize)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| ((i * 7 + salt) % 256) as u8));
    }
    bytes
}

#[test]
fn cifar_fixture_round_trips() {
    let ds = parse_cifar10(&cifar_fixture(), "fixture").unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels, vec![3, 9]);
    assert_eq!((ds.channels, ds.height, ds.width), (3, 32, 32));
    for (r, salt) in [(0usize, 0usize), (1, 101)] {
        let img = ds.image(r);
        for i in [0usize, 1, 1023, 1024, 2047, 3071] {
            assert_eq!(img[i], ((i * 7 + salt) % 256) as f32 / 255.0, "record {r} byte {i}");
        }
    }
}

#[test]
fn cifar_rejects_partial_records_and_bad_labels() {
    let mut bytes = cifar_fixture();
    bytes.push(0);
    assert!(parse_cifar10(&bytes, "fixture").is_err());
    let mut bytes = cifar_fixture();
    bytes.truncate(RECORD + 10);
    assert!(parse_cifar10(&bytes, "fixture").is_err());
    let mut bytes = cifar_fixture();
    bytes[RECORD] = 10;
    assert!(parse_cifar10(&bytes, "fixture").is_err());
    assert_eq!(parse_cifar10(&[], "fixture").unwrap().len(), 0);
}

#[test]
fn standardization_uses_configured_constants() {
    let ds = parse_cifar10(&cifar_fixture(), "fixture").unwrap();
    let mean = [0.5, 0.25, 0.0];
    let std = [0.5, 2.0, 1.0];
    let (x, t) = ds.batch::<f64>(&[1, 0], &mean, &std, None).unwrap();
    assert_eq!(x.shape(), &[2, 3, 32, 32]);
    assert_eq!(t.classes, Some(vec![9, 3]));
    let raw = ds.image(1)[1024 + 5] as f64;
    assert!((x.data()[1024 + 5] - (raw - 0.25) / 2.0).abs() < 1e-12);
}

#[test]
fn unaugmented_batches_repeat_across_epochs() {
    let ds = synthetic_task(3, 20, 16).unwrap();
    let idx = [4, 0, 17];
    let a = ds.batch::<f32>(&idx, &[0.3; 3], &[0.3; 3], None).unwrap();
    let b = ds.batch::<f32>(&idx, &[0.3; 3], &[0.3; 3], None).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (aug, t) = ds.batch::<f32>(&idx, &[0.3; 3], &[0.3; 3], Some(&mut rng)).unwrap();
    assert_eq!(aug.shape(), a.0.shape());
    assert_eq!(t.classes, a.1.classes);
}

#[test]
fn synthetic_labels_follow_the_rectangle() {
    let ds = synthetic_task(11, 30, 16).unwrap();
    let dense = ds.dense.as_ref().unwrap();
    assert_eq!(ds, synthetic_task(11, 30, 16).unwrap());
    for i in 0..ds.len() {
        let img = ds.image(i);
        let mask = &dense[i * 256..(i + 1) * 256];
        let inside: Vec<usize> = (0..256).filter(|&p| mask[p] == 1).collect();
        assert!(!inside.is_empty());
        // Inside pixels are bright in the class hue; the background stays below 0.4.
        let brightest = |p: usize| (0..3).map(|c| img[c * 256 + p]).fold(f32::MIN, f32::max);
        assert!(inside.iter().all(|&p| brightest(p) > 0.6));
        assert!((0..256).filter(|&p| mask[p] == 0).all(|p| brightest(p) < 0.4));
        // The mask is a filled axis-aligned rectangle.
        let ys: Vec<usize> = inside.iter().map(|p| p / 16).collect();
        let xs: Vec<usize> = inside.iter().map(|p| p % 16).collect();
        let h = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
        let w = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
        assert_eq!(h * w, inside.len());
        let channel_mean = |c: usize| inside.iter().map(|&p| img[c * 256 + p]).sum::<f32>() / inside.len() as f32;
        let hue = [channel_mean(0), channel_mean(1), channel_mean(2)];
        let class = match (hue[0] > 0.5, hue[1] > 0.5, hue[2] > 0.5) {
            (true, false, false) => 0,
            (false, true, false) => 1,
            (false, false, true) => 2,
            (true, true, false) => 3,
            other => panic!("unexpected hue pattern {other:?}"),
        };
        assert_eq!(class, ds.labels[i]);
    }
}

/// Multinomial logistic regression on raw pixels by full-batch gradient descent.
fn linear_probe(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.channels * train.height * train.width;
    let k = train.num_classes;
    let mut w = vec![0.0f64; k * d];
    let mut b = vec![0.0f64; k];
    let logits = |w: &[f64], b: &[f64], x: &[f32]| -> Vec<f64> {
        (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, &v)| a * v as f64).sum::<f64>()).collect()
    };
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..train.len() {
            let x = train.image(i);
            let z = logits(&w, &b, x);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - f64::from(u8::from(c == train.labels[i]));
                gb[c] += g;
                for (gwi, &xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gwi += g * xv as f64;
                }
            }
        }
        let n = train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= lr * g / n);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let z = logits(&w, &b, test.image(i));
            let arg = (0..k).max_by(|&a, &c| z[a].total_cmp(&z[c])).unwrap();
            arg == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn synthetic_classes_are_linearly_learnable() {
    let train = synthetic_task(21, 400, 8).unwrap();
    let test = synthetic_task(22, 200, 8).unwrap();
    let acc = linear_probe(&train, &test);
    eprintln!("linear probe accuracy {acc:.3}");
    assert!(acc > 0.7, "{acc}");
}

fn scalar_params(value: f32, kind: ParamKind) -> MdeqParams<f32> {
    MdeqParams::from_entries(vec![mdeq::cell::Param {
        name: "w".into(),
        kind,
        value: Tensor::new(&[1], vec![value]).unwrap(),
    }])
    .unwrap()
}

fn train_cfg(optimizer: OptimizerKind, momentum: f64, nesterov: bool, weight_decay: f64) -> TrainConfig {
    TrainConfig {
        optimizer,
        momentum,
        nesterov,
        weight_decay,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut p = init_params::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let before = p.clone();
        let grads = p.zeros_like();
        let mut opt = Optimizer::new(&p, &train_cfg(kind, 0.0, false, 0.0));
        opt.update(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }
}

#[test]
fn sgd_steps_by_hand() {
    let mut p = scalar_params(2.0, ParamKind::NormGamma);
    let g = scalar_params(0.5, ParamKind::NormGamma);
    let mut opt = Optimizer::new(&p, &train_cfg(OptimizerKind::Sgd, 0.0, false, 0.0));
    opt.update(&mut p, &g, 0.1).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 2.0 - 0.1 * 0.5);

    // Nesterov: buf₁ = g, step = g + μ·buf₁; buf₂ = μ·buf₁ + g, step = g + μ·buf₂.
    let mut p = scalar_params(1.0, ParamKind::NormGamma);
    let mut opt = Optimizer::new(&p, &train_cfg(OptimizerKind::Sgd, 0.9, true, 0.0));
    opt.update(&mut p, &g, 0.1).unwrap();
    opt.update(&mut p, &g, 0.1).unwrap();
    let expected = 1.0 - 0.1 * (0.5 + 0.9 * 0.5) - 0.1 * (0.5 + 0.9 * (0.9 * 0.5 + 0.5));
    assert!((p.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-6);
}

#[test]
fn weight_decay_touches_conv_directions_only() {
    for (kind, decays) in [(ParamKind::ConvDirection, true), (ParamKind::ConvGain, false), (ParamKind::NormGamma, false)] {
        let mut p = scalar_params(2.0, kind);
        let g = scalar_params(0.0, kind);
        let mut opt = Optimizer::new(&p, &train_cfg(OptimizerKind::Sgd, 0.0, false, 0.1));
        opt.update(&mut p, &g, 0.5).unwrap();
        let expected = if decays { 2.0 - 0.5 * 0.1 * 2.0 } else { 2.0 };
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-7, "{kind:?}");
    }
}

#[test]
fn adam_first_step_closed_form() {
    for g0 in [0.5f32, -3.0, 1e-4] {
        let mut p = scalar_params(1.0, ParamKind::NormBeta);
        let g = scalar_params(g0, ParamKind::NormBeta);
        let mut opt = Optimizer::new(&p, &train_cfg(OptimizerKind::Adam, 0.9, true, 0.0));
        opt.update(&mut p, &g, 0.01).unwrap();
        // m̂ = g and v̂ = g² after bias correction.
        let g0 = g0 as f64;
        let m_hat = (0.1 * g0) / (1.0 - 0.9);
        let v_hat = (0.001 * g0 * g0) / (1.0 - 0.999);
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-6);
    }
}

#[test]
fn optimizer_rejects_mismatched_gradients() {
    let mut p = init_params::<f32>(&ModelConfig::tiny(), 0).unwrap();
    let other = init_params::<f32>(&ModelConfig::cifar_small(), 0).unwrap();
    let mut opt = Optimizer::new(&p, &TrainConfig::default());
    assert!(opt.update(&mut p, &other, 0.1).is_err());
}

#[test]
fn cosine_schedule_landmarks() {
    assert_eq!(cosine_lr(0, 100, 0.1, 0.001).unwrap(), 0.1);
    assert!((cosine_lr(100, 100, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-15);
    assert!((cosine_lr(50, 100, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
    assert!(cosine_lr(101, 100, 0.1, 0.0).is_err());
}

#[test]
fn metric_fixtures() {
    let mut c = Confusion::new(3);
    c.add(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
    assert_eq!(c.accuracy(), 1.0);
    assert_eq!(c.mean_iou(), 1.0);

    // Truth [0,0,1,1], predicted [0,1,1,1]: IoU₀ = 1/2, IoU₁ = 2/3.
    let mut c = Confusion::new(2);
    c.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    assert!((c.mean_iou() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(c.accuracy(), 0.75);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth: Vec<usize> = (0..20_000).map(|i| i % 10).collect();
    let guess: Vec<usize> = (0..20_000).map(|_| rng.random_range(0..10)).collect();
    let mut c = Confusion::new(10);
    c.add(&truth, &guess).unwrap();
    assert!((c.accuracy() - 0.1).abs() < 0.01, "{}", c.accuracy());
}

const SMOKE: &str = "
data.kind = synthetic
data.image_size = 8
data.synthetic_train = 64
data.synthetic_test = 32
data.mean = 0.3,0.3,0.3
data.std = 0.3,0.3,0.3
model.channels = 4,8
model.expansion = 2
model.gn_groups = 2
model.dropout_rate = 0.2
model.head_channels = 4,8
model.final_channels = 16
model.num_classes = 4
solver.fwd.max_iters = 8
solver.fwd.memory = 8
solver.bwd.max_iters = 10
solver.bwd.memory = 8
train.epochs = 2
train.batch_size = 16
train.optimizer = adam
train.lr0 = 0.01
train.warmup_epochs = 1
train.warmup_depth = 3
train.softplus_epochs = 1
train.seed = 4
";

fn smoke_config() -> RunConfig {
    RunConfig::from_text(SMOKE).unwrap()
}

#[test]
fn identical_runs_write_identical_bytes() {
    let cfg = smoke_config();
    let (train, test) = load_datasets(&cfg.data).unwrap();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap().with_output(dir.path()).unwrap();
        let report = t.fit(&train, Some(&test)).unwrap();
        assert_eq!(report.epochs.len(), 2);
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        outputs.push((read("metrics.csv"), read("epochs.csv"), read("checkpoint.mdeq")));
    }
    assert_eq!(outputs[0], outputs[1]);
    let metrics = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,step,loss,metric,fwd_evals,bwd_evals,lr");
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = smoke_config();
    let (train, test) = load_datasets(&cfg.data).unwrap();
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    t.run_epoch(&train, None).unwrap();
    let bytes = t.checkpoint_bytes();
    let ckpt = decode(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(ckpt.header, CheckpointHeader { epoch: 1, fingerprint: cfg.model_fingerprint(), opt_step: 4 });

    let restored = Trainer::<f32>::resume(cfg.clone(), &ckpt).unwrap();
    for (a, b) in t.params.iter().zip(restored.params.iter()) {
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(restored.optimizer, t.optimizer);
    assert_eq!(restored.checkpoint_bytes(), bytes);

    let act = Activation::Relu;
    assert_eq!(t.evaluate(&test, act).unwrap(), restored.evaluate(&test, act).unwrap());

    let mut truncated = bytes.clone();
    truncated.pop();
    assert!(decode(&truncated, "mem".as_ref()).is_err());
    let mut other = cfg;
    other.model.channels = vec![8, 8];
    assert!(Trainer::<f32>::resume(other, &ckpt).is_err());
}

#[test]
fn evaluation_needs_data() {
    let cfg = smoke_config();
    let (_, mut test) = load_datasets(&cfg.data).unwrap();
    test.pixels.clear();
    test.labels.clear();
    let p = init_params::<f32>(&cfg.model, 0).unwrap();
    assert!(evaluate(&p, &cfg, &test, Activation::Relu, 1).is_err());
}

#[test]
fn mismatched_geometry_is_rejected() {
    let mut cfg = smoke_config();
    cfg.data.image_size = 10;
    cfg.model.channels = vec![4, 8, 8];
    cfg.model.head_channels = vec![4, 8, 8];
    let (train, _) = load_datasets(&cfg.data).unwrap();
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    assert!(t.run_epoch(&train, None).is_err());
}

#[test]
fn smoke_run_loss_trends_down_across_the_phase_switch() {
    let mut cfg = smoke_config();
    cfg.data.synthetic_train = 400;
    cfg.data.synthetic_test = 64;
    cfg.model.dropout_rate = 0.0;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 24;
    let (train, test) = load_datasets(&cfg.data).unwrap();
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let report = t.fit(&train, Some(&test)).unwrap();
    assert!(!report.flagged());
    let losses: Vec<f64> = report.steps.iter().map(|s| s.loss).collect();
    assert!(losses.len() >= 50);
    let window = |r: std::ops::Range<usize>| losses[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let (first, last) = (window(0..10), window(40..50));
    eprintln!("moving-average loss {first:.3} -> {last:.3}");
    assert!(last < first);

    let warm = report.epochs[0].eval.as_ref().unwrap().loss;
    let implicit = report.epochs[1].eval.as_ref().unwrap().loss;
    assert_eq!(report.epochs[0].phase, "unrolled");
    assert_eq!(report.epochs[1].phase, "implicit");
    assert!(warm.is_finite() && implicit.is_finite());
    assert!(implicit < 2.0 * warm && warm < 2.0 * implicit, "{warm} -> {implicit}");
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let cfg = smoke_config();
    assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(RunConfig::from_text("model.n_channels = 3").is_err());
    assert!(RunConfig::from_text("train.epochs = many").is_err());
    let mut c = cfg.clone();
    c.apply_overrides(&["train.lr0=0.5", "solver.fwd.memory = 3"]).unwrap();
    assert_eq!(c.train.lr0, 0.5);
    assert_eq!(c.solver_fwd.memory, 3);
    assert!(c.apply_overrides(&["no_equals_sign"]).is_err());
    assert_ne!(cfg.model_fingerprint(), RunConfig::default().model_fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_monotone_and_bounded(total in 1usize..500, lr0 in 1e-4f64..1.0, frac in 0.0f64..1.0) {
        let lr_min = lr0 * frac;
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, lr0, lr_min).unwrap();
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= lr_min - 1e-15 && lr <= lr0 + 1e-15);
            prev = lr;
        }
    }
}
