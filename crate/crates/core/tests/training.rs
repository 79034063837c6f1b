use cdformer::attention::PositionEncoding;
use cdformer::data::{generate_dataset, DatasetSpec};
use cdformer::model::{load_checkpoint, CdFormer, ModelConfig, Task};
use cdformer::tensor::{set_strict_mode, Graph, Tensor};
use cdformer::training::{
    clip_grad_norm, evaluate, train, AdamW, AdamWConfig, ConfusionMatrix, EpochRecord, LrSchedule, TrainConfig,
    BEST, LAST, LOG_FILE,
};
use cdformer::Error;
use proptest::prelude::*;
use std::ops::ControlFlow;

fn adam(lr_free: AdamWConfig) -> AdamW<f64> {
    AdamW::new(lr_free, &[Tensor::scalar(0.0)])
}

fn one_step(theta: f64, grad: f64, lr: f64, cfg: AdamWConfig) -> f64 {
    let mut opt = adam(cfg);
    let mut p = [Tensor::scalar(theta)];
    opt.step(&mut p, &[vec![grad]], &[true], lr).unwrap();
    p[0].item()
}

#[test]
fn adamw_examples() {
    let plain = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 0.0,
        weight_decay: 0.0,
    };
    assert!((one_step(1.0, 2.0, 0.01, plain) - 0.99).abs() < 1e-15);
    let quiet = AdamWConfig { eps: 1e-8, ..plain };
    assert_eq!(one_step(0.7, 0.0, 0.01, quiet), 0.7);
    let decay = AdamWConfig { weight_decay: 0.05, ..quiet };
    assert!((one_step(0.7, 0.0, 0.01, decay) - 0.7 * (1.0 - 0.01 * 0.05)).abs() < 1e-15);
}

#[test]
fn adamw_skips_decay_where_flagged_off() {
    let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
    let mut p = [Tensor::scalar(2.0f64), Tensor::scalar(2.0)];
    let mut opt = AdamW::new(cfg, &p);
    opt.step(&mut p, &[vec![0.0], vec![0.0]], &[true, false], 0.1).unwrap();
    assert!((p[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert_eq!(p[1].item(), 2.0);
}

#[test]
fn adamw_rejects_mismatched_gradients() {
    let mut p = [Tensor::zeros(&[2, 2])];
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    assert!(matches!(opt.step(&mut p, &[vec![0.0; 3]], &[true], 0.1), Err(Error::Shape { .. })));
    assert!(matches!(opt.step(&mut p, &[], &[], 0.1), Err(Error::Shape { .. })));
    assert!(AdamW::from_state(AdamWConfig::default(), &p, vec![Tensor::zeros(&[4])], vec![Tensor::zeros(&[2, 2])], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Textbook Adam on a 1-D quadratic, written out step by step.
    #[test]
    fn adamw_without_decay_matches_scalar_adam(theta0 in -3.0f64..3.0, target in -3.0f64..3.0, lr in 1e-4f64..0.1, steps in 1usize..40) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        let mut p = [Tensor::scalar(theta0)];
        let mut opt = AdamW::new(AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay: 0.0 }, &p);
        for t in 1..=steps {
            let g = 2.0 * (th - target);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            th -= lr * mhat / (vhat.sqrt() + eps);
            let g2 = 2.0 * (p[0].item() - target);
            opt.step(&mut p, &[vec![g2]], &[true], lr).unwrap();
            prop_assert!((p[0].item() - th).abs() < 1e-12);
        }
    }

    #[test]
    fn unsmoothed_loss_equals_plain_cross_entropy(logits in prop::collection::vec(-5.0f64..5.0, 12), label in 0usize..4) {
        let g = Graph::<f64>::inference();
        let x = g.constant(&Tensor::new(&[3, 4], logits.clone()).unwrap());
        let labels = [label, (label + 1) % 4, 0];
        let loss = x.cross_entropy(&labels, 0.0).unwrap().item();
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[l].exp() / z).ln();
        }
        prop_assert!((loss - want / 3.0).abs() < 1e-10);
    }

    #[test]
    fn metrics_are_bounded_and_oa_is_relabel_invariant(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        shift in 1usize..4,
    ) {
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        for &(t, p) in &pairs {
            a.add(t, p).unwrap();
            b.add((t + shift) % 4, (p + shift) % 4).unwrap();
        }
        let (ma, mb) = (a.metrics().unwrap(), b.metrics().unwrap());
        prop_assert_eq!(ma.oa, mb.oa);
        for v in [ma.oa, ma.macc, ma.miou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn schedules() {
    let cos = LrSchedule::Cosine { lr0: 0.1 };
    assert_eq!(cos.lr_at(0, 100), 0.1);
    assert!(cos.lr_at(100, 100).abs() < 1e-18);
    assert!((cos.lr_at(50, 100) - 0.05).abs() < 1e-15);
    let step = LrSchedule::Step {
        lr0: 0.01,
        milestones: vec![60, 80],
        gamma: 0.1,
    };
    assert_eq!(step.lr_at(59, 100), 0.01);
    assert!((step.lr_at(70, 100) - 0.001).abs() < 1e-15);
    assert!((step.lr_at(90, 100) - 0.0001).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant { lr: 0.3 }.lr_at(7, 10), 0.3);
    let parsed: LrSchedule = serde_json::from_str(r#"{"kind":"step","lr0":0.01,"milestones":[60,80]}"#).unwrap();
    assert_eq!(parsed, step);
}

fn ce(logits: &[f64], u: usize, labels: &[usize], eps: f64) -> Result<f64, Error> {
    let g = Graph::<f64>::inference();
    let x = g.constant(&Tensor::new(&[labels.len(), u], logits.to_vec()).unwrap());
    Ok(x.cross_entropy(labels, eps)?.item())
}

#[test]
fn label_smoothing_examples() {
    for eps in [0.0, 0.1, 0.5] {
        let l = ce(&[0.3; 10], 10, &[4], eps).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }
    assert!(ce(&[0.0, 60.0, 0.0], 3, &[1], 0.0).unwrap() < 1e-20);

    // margin 30 on the true class, U = 10, eps = 0.1
    let mut logits = vec![0.0; 10];
    logits[2] = 30.0;
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    let logp: Vec<f64> = logits.iter().map(|v| v - z.ln()).collect();
    let mut want = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        let target = 0.1 / 10.0 + if i == 2 { 0.9 } else { 0.0 };
        want -= target * lp;
    }
    assert!((ce(&logits, 10, &[2], 0.1).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.09 * 30.0).abs() < 1e-9);

    assert!(matches!(ce(&[0.0; 3], 3, &[3], 0.1), Err(Error::Index { .. })));
}

#[test]
fn metric_examples() {
    let mut cm = ConfusionMatrix::new(3);
    cm.add_all(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
    let m = cm.metrics().unwrap();
    assert_eq!((m.oa, m.macc, m.miou), (1.0, 1.0, 1.0));

    let mut cm = ConfusionMatrix::new(2);
    cm.add_all(&[1, 1, 1], &[0, 0, 0]).unwrap();
    let m = cm.metrics().unwrap();
    assert_eq!((m.oa, m.miou), (0.0, 0.0));

    let m = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap().metrics().unwrap();
    assert!((m.oa - 4.0 / 6.0).abs() < 1e-15);
    assert!((m.miou - 0.5).abs() < 1e-15);

    // class 2 absent from truth and prediction is skipped
    let mut cm = ConfusionMatrix::new(3);
    cm.add_all(&[0, 1], &[0, 1]).unwrap();
    assert_eq!(cm.metrics().unwrap().miou, 1.0);

    assert!(matches!(ConfusionMatrix::new(2).metrics(), Err(Error::Contract(_))));
    assert!(matches!(ConfusionMatrix::new(2).add(2, 0), Err(Error::Index { .. })));
}

#[test]
fn gradient_clipping_bounds_global_norm() {
    let mut g = vec![vec![3.0f64], vec![4.0]];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g, vec![vec![3.0], vec![4.0]]);
    clip_grad_norm(&mut g, 1.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
}

fn tiny(task: Task) -> CdFormer {
    CdFormer::new(ModelConfig {
        blocks: vec![1, 1],
        channels: vec![8, 16],
        heads: vec![2, 2],
        k_neighbors: 8,
        scale_s: 4,
        block_scale: None,
        task,
        in_channels: 3,
        collect: true,
        distribute: true,
        position_encoding: PositionEncoding::Contextual,
        ffn_ratio: 2,
    })
    .unwrap()
}

fn quiet() -> impl FnMut(&EpochRecord) -> ControlFlow<()> {
    |_| ControlFlow::Continue(())
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = generate_dataset(&DatasetSpec::classification(3, 2, 1, 48, 0)).unwrap();
    let model = tiny(data.task);
    let cfg = TrainConfig {
        schedule: LrSchedule::Constant { lr: 0.0 },
        batch_size: 2,
        ..TrainConfig::new(1, 0.0)
    };
    let out = train::<f64>(&model, &data, &cfg, None, false, &mut quiet()).unwrap();
    let init = model.init_params::<f64>(cfg.seed);
    for (a, b) in out.params.tensors().iter().zip(init.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn fixed_batch_loss_decreases() {
    let data = generate_dataset(&DatasetSpec::classification(3, 2, 0, 48, 1)).unwrap();
    let model = tiny(data.task);
    let cfg = TrainConfig {
        batch_size: 6,
        schedule: LrSchedule::Constant { lr: 1e-3 },
        ..TrainConfig::new(50, 0.0)
    };
    let out = train::<f32>(&model, &data, &cfg, None, false, &mut quiet()).unwrap();
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert_eq!(out.history.last().unwrap().step, 50);
    assert!(last < 0.9 * first, "{first} -> {last}");
}

#[test]
fn strict_mode_runs_are_reproducible() {
    set_strict_mode(true);
    let data = generate_dataset(&DatasetSpec::part_segmentation(1, 1, 40, 2)).unwrap();
    let model = tiny(data.task);
    let cfg = TrainConfig {
        batch_size: 4,
        augment: Some(cdformer::data::AugmentConfig::standard()),
        seed: 3,
        ..TrainConfig::new(2, 1e-3)
    };
    let a = train::<f32>(&model, &data, &cfg, None, false, &mut quiet()).unwrap();
    let b = train::<f32>(&model, &data, &cfg, None, false, &mut quiet()).unwrap();
    set_strict_mode(false);
    let losses = |o: &cdformer::training::TrainOutcome<f32>| o.history.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert!(a.history[0].val_miou.is_some());
    for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data = generate_dataset(&DatasetSpec::classification(3, 2, 1, 40, 4)).unwrap();
    let model = tiny(data.task);
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 5,
        schedule: LrSchedule::Constant { lr: 1e-3 },
        augment: Some(cdformer::data::AugmentConfig::standard()),
        ..TrainConfig::new(4, 0.0)
    };
    let dir = tempfile::tempdir().unwrap();
    let full = train::<f64>(&model, &data, &cfg, Some(&dir.path().join("full")), false, &mut quiet()).unwrap();

    let part = dir.path().join("part");
    let head = TrainConfig { epochs: 2, ..cfg.clone() };
    train::<f64>(&model, &data, &head, Some(&part), false, &mut quiet()).unwrap();
    let mut epochs = Vec::new();
    let resumed = train::<f64>(&model, &data, &cfg, Some(&part), true, &mut |r| {
        epochs.push(r.epoch);
        ControlFlow::Continue(())
    })
    .unwrap();
    assert_eq!(epochs, vec![3, 4]);

    let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.epoch, r.step, r.train_loss.to_bits(), r.val_oa)).collect::<Vec<_>>();
    assert_eq!(strip(&resumed.history), strip(&full.history));
    for (a, b) in resumed.params.tensors().iter().zip(full.params.tensors()) {
        assert_eq!(a.data(), b.data());
    }

    let log = std::fs::read_to_string(part.join(LOG_FILE)).unwrap();
    let logged: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(strip(&logged), strip(&full.history));
    assert!(log.lines().next().unwrap().contains("\"train_OA\""));
    let last = load_checkpoint::<f64>(&part.join(LAST)).unwrap();
    assert_eq!(last.meta.epoch, 4);
    assert!(last.optimizer.is_some());
    assert!(load_checkpoint::<f64>(&part.join(BEST)).unwrap().optimizer.is_none());
}

#[test]
fn callback_can_stop_the_run() {
    let data = generate_dataset(&DatasetSpec::classification(2, 1, 0, 32, 0)).unwrap();
    let out = train::<f32>(&tiny(data.task), &data, &TrainConfig::new(5, 1e-3), None, false, &mut |r| {
        if r.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(out.history.len(), 2);
}

#[test]
fn resume_without_checkpoint_fails() {
    let data = generate_dataset(&DatasetSpec::classification(2, 1, 0, 32, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = train::<f32>(&tiny(data.task), &data, &TrainConfig::new(1, 1e-3), Some(dir.path()), true, &mut quiet());
    assert!(r.is_err());
    let r = train::<f32>(&tiny(data.task), &data, &TrainConfig::new(1, 1e-3), None, true, &mut quiet());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn task_mismatch_is_config_error() {
    let data = generate_dataset(&DatasetSpec::classification(3, 1, 0, 32, 0)).unwrap();
    let model = tiny(Task::Classification { classes: 5 });
    let r = train::<f32>(&model, &data, &TrainConfig::new(1, 1e-3), None, false, &mut quiet());
    assert!(matches!(r, Err(Error::Config(_))));
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::new(1, 1e-3) };
    assert!(matches!(train::<f32>(&tiny(data.task), &data, &bad, None, false, &mut quiet()), Err(Error::Config(_))));
}

#[test]
fn evaluation_counts_every_point() {
    let data = generate_dataset(&DatasetSpec::part_segmentation(1, 1, 40, 6)).unwrap();
    let model = tiny(data.task);
    let store = model.init_params::<f32>(0);
    let (loss, cm) = evaluate(&model, &store, &data.val, 0.1).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(cm.total(), data.val.iter().map(|s| s.cloud.len() as u64).sum::<u64>());
}
