use super::*;
use crate::ops::OperatorSpec;
use crate::tasks::{Generator, TaskSpec};

fn space() -> SearchSpace {
    let d = 8;
    SearchSpace::new(3, vec![OperatorSpec::ffn(d, 8), OperatorSpec::conv(d, 3), OperatorSpec::mha(d, 2, 8)], 10, 6).unwrap()
}

fn task() -> Task {
    Task::new(TaskSpec {
        vocab: 10,
        seq_len: 6,
        generator: Generator::Markov2 { table_seed: 3, branching: 2, groups: 4 },
        mask_rate: 0.3,
        train_seed: 1,
        val_seed: 2,
    })
    .unwrap()
}

fn cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        steps: 12,
        batch_size: 2,
        warmup_steps: 2,
        steps_per_epoch: 4,
        probe_pool: 3,
        val_batches: 1,
        val_batch_size: 2,
        align: AlignmentConfig { lambda: 0.5, block_size: 1, warm_start_epochs: 1, target: AlignTarget::Anchor },
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_net_unchanged() {
    let net = SuperNet::<f64>::new(space(), 0);
    let fp = net.fingerprint();
    let (out, log) = train_supernet(net, &task(), TrainConfig { steps: 0, warmup_steps: 0, ..cfg(Method::Spos) }).unwrap();
    assert_eq!(out.fingerprint(), fp);
    assert!(log.steps.is_empty());
}

#[test]
fn walk_methods_change_one_operator_per_step() {
    for m in [Method::MagicT, Method::MagicAt] {
        let (_, log) = train_supernet(SuperNet::<f64>::new(space(), 0), &task(), cfg(m)).unwrap();
        assert_eq!(log.steps.len(), 12);
        for w in log.steps.windows(2) {
            assert_eq!(w[0].child.hamming(&w[1].child), 1);
        }
    }
}

#[test]
fn warm_start_records_zero_alignment() {
    let (_, log) = train_supernet(SuperNet::<f64>::new(space(), 0), &task(), cfg(Method::MagicA)).unwrap();
    assert!(log.steps[..4].iter().all(|s| s.align_loss == 0.0));
    assert!(log.steps[4..].iter().any(|s| s.align_loss > 0.0));
    assert_eq!(log.anchor_log().len(), 3);
    let scores: Vec<f64> = log.anchor_log().iter().filter_map(|a| a.val).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn alignment_without_weight_matches_spos() {
    let task = task();
    let (a, la) = train_supernet(SuperNet::<f64>::new(space(), 0), &task, cfg(Method::Spos)).unwrap();
    let mut c = cfg(Method::MagicA);
    c.align.lambda = 0.0;
    c.align.warm_start_epochs = u64::MAX;
    let (b, lb) = train_supernet(SuperNet::<f64>::new(space(), 0), &task, c).unwrap();
    assert_eq!(la.steps, lb.steps);
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let task = task();
    let (full, full_log) = train_supernet(SuperNet::<f64>::new(space(), 0), &task, cfg(Method::MagicAt)).unwrap();
    let (again, again_log) = train_supernet(SuperNet::<f64>::new(space(), 0), &task, cfg(Method::MagicAt)).unwrap();
    assert_eq!(full, again);
    assert_eq!(full_log, again_log);

    let mut t = Trainer::new(SuperNet::<f64>::new(space(), 0), &task, cfg(Method::MagicAt)).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let mut log = t.log.clone();
    let mut resumed = Trainer::resume(ckpt, &task, cfg(Method::MagicAt)).unwrap();
    resumed.run().unwrap();
    log.steps.extend(resumed.log.steps.clone());
    log.epochs.extend(resumed.log.epochs.clone());
    assert_eq!(resumed.net, full);
    assert_eq!(log, full_log);
}

#[test]
fn divergence_aborts() {
    let c = TrainConfig { divergence_threshold: 0.1, ..cfg(Method::Spos) };
    assert!(matches!(
        train_supernet(SuperNet::<f64>::new(space(), 0), &task(), c),
        Err(TrainError::Diverged { step: 0, .. })
    ));
}

#[test]
fn config_validation() {
    let s = space();
    assert!(cfg(Method::Spos).validate(&s).is_ok());
    assert!(TrainConfig { warmup_steps: 20, ..cfg(Method::Spos) }.validate(&s).is_err());
    let mut c = cfg(Method::MagicT);
    c.sampler.k = 4;
    assert!(matches!(c.validate(&s), Err(TrainError::Sampler(_))));
}

#[test]
fn standalone_is_deterministic_and_untrained_is_near_chance() {
    let task = task();
    let child = ChildModel::new(vec![1, 0, 2]);
    let sc = StandaloneConfig { steps: 5, batch_size: 2, warmup_steps: 1, val_batches: 2, val_batch_size: 4, ..Default::default() };
    let (_, a) = train_standalone::<f64>(&space(), &child, &task, &sc).unwrap();
    let (_, b) = train_standalone::<f64>(&space(), &child, &task, &sc).unwrap();
    assert_eq!(a, b);
    let (_, untrained) =
        train_standalone::<f64>(&space(), &child, &task, &StandaloneConfig { steps: 0, warmup_steps: 0, ..sc }).unwrap();
    assert!(untrained < 0.5, "{}", untrained);
}

#[test]
fn proxy_is_negative_loss() {
    let net = SuperNet::<f64>::new(space(), 0);
    let val = task().val_set(2, 2);
    let child = ChildModel::new(vec![0, 1, 2]);
    let p = evaluate_proxy(&net, &child, &val).unwrap();
    assert_eq!(p, evaluate_proxy(&net, &child, &val).unwrap());
    let mean: f64 = val.iter().map(|b| net.view(&child).unwrap().prediction_loss(b).unwrap()).sum::<f64>() / 2.0;
    assert!((p + mean).abs() < 1e-12);
    assert!(p < 0.0);
}
