use gsc::autodiff::{Tape, Tensor};
use gsc::losses::{ce_loss, LossWeights};
use gsc::scenario::{build_step_dataset, ScenarioSpec, Setting};
use gsc::segnet::{encode_checkpoint, SegNetwork};
use gsc::trainer::{
    epoch_order, init_rng, learning_rate, prepare_relabel, run_scenario, to_channels, train_incremental_step,
    train_step0, Ablation, Method, MethodSpec, Sgd, TrainConfig,
};

fn tiny_spec(setting: Setting) -> ScenarioSpec {
    let mut spec = ScenarioSpec::preset("4-1", setting, 3).unwrap();
    spec.image_size = (16, 16);
    spec.images_per_step = 12;
    spec.test_images_per_step = 6;
    spec
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs_per_step: 3,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn step0_loss_decreases() {
    let spec = tiny_spec(Setting::Overlapped);
    let cfg = TrainConfig {
        epochs_per_step: 8,
        ..tiny_config()
    };
    let data = build_step_dataset(&spec, 0).unwrap();
    let (net, logs) = train_step0::<f32>(&cfg, &spec, &data).unwrap();
    assert_eq!(logs.len(), 8);
    assert!(logs.last().unwrap().total < logs[0].total, "{:?}", logs);
    assert_eq!(net.trained_steps(), 1);
    assert_eq!(net.head_width(), 5);
}

#[test]
fn repeated_runs_are_identical() {
    let spec = tiny_spec(Setting::Disjoint);
    let methods = [
        MethodSpec::plain(Method::Gsc),
        MethodSpec::plain(Method::Ft),
        MethodSpec::plain(Method::Joint),
    ];
    let a = run_scenario(&spec, &tiny_config(), &methods).unwrap();
    let b = run_scenario(&spec, &tiny_config(), &methods).unwrap();
    assert_eq!(a.summary_rows(), b.summary_rows());
    assert_eq!(a.class_rows(), b.class_rows());
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.checkpoints, y.checkpoints);
        assert_eq!(x.logs, y.logs);
    }
    // joint reports a single row at the last step
    let joint = a.method("joint").unwrap();
    assert_eq!(joint.steps.len(), 1);
    assert_eq!(joint.steps[0].step, spec.steps() - 1);
}

/// With every auxiliary weight at zero and psi fixed to one, GSC is plain
/// cross-entropy on the prototype-checked pseudo labels, refreshed every epoch.
#[test]
fn gsc_without_extras_is_pseudo_label_cross_entropy() {
    let spec = tiny_spec(Setting::Overlapped);
    let cfg = tiny_config();
    let d0 = build_step_dataset(&spec, 0).unwrap();
    let (prev, _) = train_step0::<f32>(&cfg, &spec, &d0).unwrap();
    let data = build_step_dataset(&spec, 1).unwrap();

    let method = MethodSpec {
        label: "bare".into(),
        method: Method::Gsc,
        ablation: Ablation {
            no_sg: true,
            ..Ablation::default()
        },
        weights: Some(LossWeights::ZERO),
    };
    let trained = train_incremental_step(&cfg, &spec, &prev, &data, &method).unwrap();

    // reference loop
    let images = data.images.clone();
    let gt = to_channels(&data.gt_visible, &spec.channel_of()).unwrap();
    let px = data.pixels_per_image();
    let mut net: SegNetwork<f32> = prev
        .expand_head(spec.groups[1].len(), cfg.head_init, &mut init_rng(cfg.seed, 1))
        .unwrap();
    let ctx = prepare_relabel(&prev, &images, gt, cfg.eval_chunk).unwrap();
    let mut sgd = Sgd::new(&net, cfg.momentum, cfg.nesterov);
    for epoch in 0..cfg.epochs_per_step {
        let pseudo = ctx
            .relabel_with(&net, &images, cfg.eval_chunk, cfg.temperature)
            .unwrap()
            .labels;
        let lr = learning_rate(cfg.lr_incremental, cfg.lr_decay, epoch);
        for batch in epoch_order(cfg.seed, 1, epoch, images.shape()[0]).chunks(cfg.batch_size) {
            let targets: Vec<Option<usize>> = batch
                .iter()
                .flat_map(|&i| pseudo[i * px..(i + 1) * px].iter().copied())
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(images.gather_batch(batch));
            let fwd = net.forward(&mut tape, x, true).unwrap();
            let p = tape.softmax(fwd.logits).unwrap();
            let loss = ce_loss(&mut tape, p, &targets).unwrap().var;
            tape.backward(loss).unwrap();
            let grads: Vec<Option<&Tensor<f32>>> = fwd.params.iter().map(|&v| tape.grad(v)).collect();
            sgd.step(net.params_mut(), &grads, lr).unwrap();
        }
    }
    net.mark_step_trained();
    assert_eq!(encode_checkpoint(&net), encode_checkpoint(&trained.net));
    // no auxiliary term needs the frozen model during optimization
    assert_eq!(trained.old_model_queries, 1);
}

#[test]
fn fine_tuning_ignores_the_old_model() {
    let spec = tiny_spec(Setting::Overlapped);
    let report = run_scenario(&spec, &tiny_config(), &[MethodSpec::plain(Method::Ft)]).unwrap();
    assert_eq!(report.methods[0].old_model_queries, 0);
    assert!(report.methods[0].audits.is_empty());
}
