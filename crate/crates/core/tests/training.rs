use std::collections::BTreeMap;

use vidseg::augment::AugmentConfig;
use vidseg::dataset::generate_split;
use vidseg::tape::Op;
use vidseg::train::{clip_global_norm, evaluate, poly_lr, train, warm_start, Adam};
use vidseg::{
    DatasetConfig, Network, NetworkConfig, ParamSet, RunResult, Tape, Tensor, TrainConfig, UnitDesign, Var, Version,
};

fn tiny_data(classes: usize, n: usize) -> (DatasetConfig, Vec<vidseg::VideoSample>) {
    let cfg = DatasetConfig {
        seed: 3,
        n_train: n,
        n_val: 2,
        num_classes: classes,
        frames: 2,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let samples = generate_split(&cfg, "train").unwrap();
    (cfg, samples)
}

fn tiny_net(classes: usize, version: Version) -> NetworkConfig {
    NetworkConfig {
        num_classes: classes,
        base_channels: 4,
        branch_widths: [4, 4, 4],
        branch_depths: [1, 1, 1],
        height: 16,
        width: 16,
        ..NetworkConfig::default()
    }
    .with_version(version, UnitDesign::Faster)
}

fn tiny_train(classes: usize, version: Version, iters: usize) -> TrainConfig {
    TrainConfig {
        initial_lr: 1e-2,
        total_iters: iters,
        augment: AugmentConfig::disabled(),
        network: tiny_net(classes, version),
        ..TrainConfig::default()
    }
}

#[test]
fn poly_schedule_midpoint() {
    let cfg = TrainConfig::default();
    assert!((poly_lr(2500, &cfg).unwrap() - 5.358_867_312_681_466e-6).abs() < 1e-18);
    assert_eq!(poly_lr(0, &cfg).unwrap(), 1e-5);
    assert_eq!(poly_lr(5000, &cfg).unwrap(), 0.0);
    assert!(poly_lr(5001, &cfg).is_err());
}

#[test]
fn adam_matches_a_scalar_reference() {
    let mut params = ParamSet::<f64>::new();
    params.add("w", Tensor::vector(vec![0.5, -1.5]));
    let mut adam = Adam::new(&params);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-3);
    let mut reference = [(0.5f64, 0.0f64, 0.0f64), (-1.5, 0.0, 0.0)];
    for step in 1..=100 {
        let grads: Vec<f64> = reference
            .iter()
            .map(|&(p, _, _)| 2.0 * p + (step as f64).sin())
            .collect();
        adam.update(&mut params, &[Tensor::vector(grads.clone())], lr);
        for (r, g) in reference.iter_mut().zip(&grads) {
            r.1 = b1 * r.1 + (1.0 - b1) * g;
            r.2 = b2 * r.2 + (1.0 - b2) * g * g;
            let mhat = r.1 / (1.0 - b1.powi(step));
            let vhat = r.2 / (1.0 - b2.powi(step));
            r.0 -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    assert_eq!(adam.steps(), 100);
    let got = params.get(params.id("w").unwrap()).data().to_vec();
    for (g, r) in got.iter().zip(&reference) {
        assert!((g - r.0).abs() < 1e-12, "{g} vs {}", r.0);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut params = ParamSet::<f32>::new();
    params.add("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
    let before = params.clone();
    let mut adam = Adam::new(&params);
    adam.update(&mut params, &[Tensor::vector(vec![5.0, -1.0, 0.5])], 0.0);
    assert_eq!(params.get(params.id("w").unwrap()), before.get(before.id("w").unwrap()));
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![Tensor::<f64>::vector(vec![3.0]), Tensor::vector(vec![0.0, 4.0])];
    let pre = clip_global_norm(&mut g, 1.0);
    assert_eq!(pre, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((g[1].data()[1] - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::<f64>::vector(vec![0.3, 0.4])];
    assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
    assert_eq!(small[0].data(), &[0.3, 0.4]);
}

fn consumers(tape: &Tape<f32>, v: Var) -> usize {
    tape.ops().filter(|(_, op)| op.inputs().contains(&v)).count()
}

#[test]
fn only_the_final_frame_reaches_a_unitless_loss() {
    let (_, samples) = tiny_data(4, 1);
    let frames: Vec<Tensor<f32>> = samples[0].frames.clone();
    for (version, history_used) in [(Version::Base, false), (Version::V5, true), (Version::V2, true)] {
        let net = Network::<f32>::build(tiny_net(4, version), 0).unwrap();
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape);
        let vars: Vec<Var> = frames.iter().map(|f| tape.leaf(f.clone(), true)).collect();
        let (loss, trace) = net.sequence_loss(&mut tape, &p, &vars, &samples[0].label).unwrap();
        assert!(matches!(tape.op(loss), Op::CrossEntropy { .. }));
        assert_eq!(trace.logits[0].is_some(), history_used, "{version:?}");
        assert_eq!(consumers(&tape, vars[0]) > 0, history_used, "{version:?}");
        let cross_entropies = tape
            .ops()
            .filter(|(_, op)| matches!(op, Op::CrossEntropy { .. }))
            .count();
        assert_eq!(cross_entropies, 1);
        let mut grads = tape.backward(loss).unwrap();
        let g0 = grads.take(vars[0]);
        assert_eq!(g0.is_some_and(|g| g.sum_sq() > 0.0), history_used, "{version:?}");
    }
}

#[test]
fn two_class_problem_is_learnt() {
    let (_, samples) = tiny_data(2, 8);
    let cfg = tiny_train(2, Version::Base, 400);
    let out = train(&cfg, &samples, None, &mut |_, _| {}).unwrap();
    let tail: f64 = out.losses[380..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.1, "final losses average {tail}");
    let m = evaluate(&out.network, &samples, None).unwrap();
    assert!(m.accuracy > 0.95, "train accuracy {}", m.accuracy);
}

#[test]
fn training_is_deterministic() {
    let (_, samples) = tiny_data(3, 4);
    let mut cfg = tiny_train(3, Version::V5, 12);
    cfg.augment = AugmentConfig::default();
    let a = train(&cfg, &samples, None, &mut |_, _| {}).unwrap();
    let b = train(&cfg, &samples, None, &mut |_, _| {}).unwrap();
    assert_eq!(a.losses, b.losses);
    for ((na, ta), (nb, tb)) in a.network.params.iter().zip(b.network.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    cfg.seed = 1;
    let c = train(&cfg, &samples, None, &mut |_, _| {}).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn warm_start_copies_only_the_backbone() {
    let base = Network::<f32>::build(tiny_net(4, Version::Base), 7).unwrap();
    let mut v6 = Network::<f32>::build(tiny_net(4, Version::V6), 8).unwrap();
    let fresh_unit = v6
        .params
        .iter()
        .find(|(n, _)| n.starts_with("unit."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .unwrap();
    let copied = warm_start(&mut v6, &base.params).unwrap();
    assert_eq!(copied, base.params.len());
    for (name, t) in base.params.iter() {
        assert_eq!(v6.params.get(v6.params.id(name).unwrap()), t);
    }
    assert_eq!(v6.params.get(v6.params.id(&fresh_unit.0).unwrap()), &fresh_unit.1);

    let wider = Network::<f32>::build(tiny_net(6, Version::Base), 7).unwrap();
    assert!(warm_start(&mut v6, &wider.params).is_err());
}

#[test]
fn mismatched_data_is_rejected() {
    let (_, samples) = tiny_data(4, 2);
    let cfg = tiny_train(3, Version::Base, 2);
    assert!(train(&cfg, &samples, None, &mut |_, _| {}).is_err());
    let wrong_size = TrainConfig {
        network: NetworkConfig {
            height: 32,
            ..tiny_net(4, Version::Base)
        },
        ..tiny_train(4, Version::Base, 2)
    };
    assert!(train(&wrong_size, &samples, None, &mut |_, _| {}).is_err());
}

#[test]
fn spread_over_repetitions() {
    let run = |v: f64| BTreeMap::from([("val.mIoU".to_string(), v)]);
    let same = RunResult::from_runs(vec![run(0.4); 5]).unwrap();
    assert_eq!(same.std["val.mIoU"], 0.0);
    let spread = RunResult::from_runs(vec![run(1.0), run(3.0)]).unwrap();
    assert_eq!(spread.mean["val.mIoU"], 2.0);
    assert_eq!(spread.std["val.mIoU"], 1.0);
    assert!(RunResult::from_runs(vec![]).is_err());
}

#[test]
fn evaluation_reports_flicker_only_for_sequences() {
    let (_, samples) = tiny_data(4, 2);
    let net = Network::<f32>::build(tiny_net(4, Version::V2), 0).unwrap();
    let m = evaluate(&net, &samples, None).unwrap();
    assert!(m.mfip_percent.is_some());
    let single: Vec<_> = samples
        .iter()
        .map(|s| vidseg::VideoSample {
            frames: vec![s.frames[1].clone()],
            ..s.clone()
        })
        .collect();
    assert_eq!(evaluate(&net, &single, None).unwrap().mfip_percent, None);
}
