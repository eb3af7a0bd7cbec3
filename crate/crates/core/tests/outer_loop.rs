use std::collections::BTreeMap;

use npbml_ad::{Precision, Tensor};
use npbml_core::checkpoint::Checkpoint;
use npbml_core::inner::InnerConfig;
use npbml_core::model::{Activation, EncoderSpec, MetaModel, TaskShape};
use npbml_core::outer::{
    meta_objective, meta_step, read_metrics, AdamState, EpisodeContext, Execution, MetaConfig, Trainer, BEST_FILE,
    LATEST_FILE, METRICS_FILE,
};
use npbml_core::params::{MetaParams, Variant};
use npbml_core::tasks::{PrototypeScorer, Split, TaskFamily, TaskKind, TaskSpec};
use npbml_core::verify::tiny_family;

fn small_model(variant: Variant) -> MetaModel {
    MetaModel::new(
        EncoderSpec::mlp(&[4, 8, 4], Activation::Relu),
        TaskShape {
            kind: TaskKind::Classification,
            n_way: 2,
        },
        variant,
    )
    .unwrap()
}

fn meta_config(steps: usize) -> MetaConfig {
    MetaConfig {
        steps,
        meta_batch: 2,
        val_interval: 2,
        val_episodes: 4,
        seed: 9,
        ..MetaConfig::default()
    }
}

fn trainer<'a>(model: &'a MetaModel, family: &'a TaskFamily, spec: &'a TaskSpec, scorer: &'a PrototypeScorer, steps: usize, workers: usize) -> Trainer<'a> {
    Trainer {
        model,
        family,
        spec,
        inner: InnerConfig::plain(0.1, 2),
        meta: meta_config(steps),
        exec: Execution::new(workers, Precision::Double).unwrap(),
        scorer: Some(scorer),
    }
}

#[test]
fn first_adam_step_moves_each_coordinate_by_eta() {
    let model = small_model(Variant::maml());
    let mut params = model.init_meta_params(None, 0).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&model, &params);
    let cfg = MetaConfig::default();
    let grads: BTreeMap<String, Tensor> = params
        .iter()
        .filter(|(k, _)| model.is_trainable(k))
        .map(|(k, v)| (k.clone(), v.map(|x| if x >= 0.0 { 0.5 } else { -2.0 })))
        .collect();
    state.update(&mut params, &grads, &cfg).unwrap();
    // m̂ = g and v̂ = g² after bias correction, so the step is η g / (|g| + ε)
    for (name, p) in params.iter() {
        let Some(g) = grads.get(name) else {
            assert_eq!(p, before.get(name).unwrap(), "frozen {name} moved");
            continue;
        };
        for ((new, old), gi) in p.data().iter().zip(before.get(name).unwrap().data()).zip(g.data()) {
            let expected = old - cfg.eta * gi / (gi.abs() + cfg.eps);
            assert!((new - expected).abs() < 1e-15, "{name}");
        }
    }
}

#[test]
fn batch_objective_is_the_size_weighted_mean() {
    let model = small_model(Variant::full());
    let params = model.init_meta_params(None, 3).unwrap();
    let scorer = PrototypeScorer::new();
    let inner = InnerConfig::plain(0.1, 2);
    let exec = Execution::double();
    let ctx = EpisodeContext {
        model: &model,
        scorer: Some(&scorer),
        inner: &inner,
        exec: &exec,
    };
    let spec = TaskSpec::classification(2, 1, 4);
    let episodes: Vec<_> = (0..5).map(|i| tiny_family().episode(&spec, Split::Train, 1, i).unwrap()).collect();
    let (a, b) = episodes.split_at(2);
    let whole = meta_objective(&ctx, &params, &episodes).unwrap();
    let parts = (2.0 * meta_objective(&ctx, &params, a).unwrap() + 3.0 * meta_objective(&ctx, &params, b).unwrap()) / 5.0;
    assert!((whole - parts).abs() <= 1e-7);
}

#[test]
fn clipping_is_reported_against_the_raw_norm() {
    let model = small_model(Variant::full());
    let mut params = model.init_meta_params(None, 3).unwrap();
    let mut state = AdamState::new(&model, &params);
    let scorer = PrototypeScorer::new();
    let inner = InnerConfig::plain(0.1, 2);
    let exec = Execution::double();
    let ctx = EpisodeContext {
        model: &model,
        scorer: Some(&scorer),
        inner: &inner,
        exec: &exec,
    };
    let spec = TaskSpec::classification(2, 1, 4);
    let batch = vec![tiny_family().episode(&spec, Split::Train, 1, 0).unwrap()];
    let cfg = MetaConfig {
        clip_norm: 1e-6,
        ..MetaConfig::default()
    };
    let stats = meta_step(&ctx, &mut params, &mut state, &batch, &cfg).unwrap();
    assert!(stats.clipped);
    assert!(stats.grad_norm > 1e-6);
    assert!(!stats.skipped);
}

#[test]
fn zero_meta_steps_keep_the_initialization() {
    let model = small_model(Variant::full());
    let family = tiny_family();
    let spec = TaskSpec::classification(2, 1, 4);
    let scorer = PrototypeScorer::new();
    let init = model.init_meta_params(None, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = trainer(&model, &family, &spec, &scorer, 0, 1).train(init.clone(), Some(dir.path())).unwrap();
    assert_eq!(out.best, init);
    assert_eq!(out.last, init);
    assert!(out.log.is_empty());
    assert_eq!(Checkpoint::load(&dir.path().join(BEST_FILE)).unwrap().params().unwrap(), init);
}

#[test]
fn training_is_deterministic_and_worker_count_free() {
    let model = small_model(Variant::full());
    let family = tiny_family();
    let spec = TaskSpec::classification(2, 1, 4);
    let scorer = PrototypeScorer::new();
    let init = model.init_meta_params(None, 5).unwrap();
    let run = |workers| trainer(&model, &family, &spec, &scorer, 4, workers).train(init.clone(), None).unwrap();
    let (a, b, c) = (run(1), run(1), run(3));
    assert_eq!(a.last, b.last);
    assert_eq!(a.last, c.last);
    assert_eq!(a.log, c.log);
    assert!(a.last.max_abs_diff(&init) > 0.0);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let model = small_model(Variant::full());
    let family = tiny_family();
    let spec = TaskSpec::classification(2, 1, 4);
    let scorer = PrototypeScorer::new();
    let init = model.init_meta_params(None, 5).unwrap();

    let straight = tempfile::tempdir().unwrap();
    let full = trainer(&model, &family, &spec, &scorer, 4, 1).train(init.clone(), Some(straight.path())).unwrap();

    let split = tempfile::tempdir().unwrap();
    trainer(&model, &family, &spec, &scorer, 2, 1).train(init.clone(), Some(split.path())).unwrap();
    let resumed = trainer(&model, &family, &spec, &scorer, 4, 1).train(init, Some(split.path())).unwrap();

    assert_eq!(full.last, resumed.last);
    assert_eq!(full.best, resumed.best);
    let a = read_metrics(&straight.path().join(METRICS_FILE), usize::MAX).unwrap();
    let b = read_metrics(&split.path().join(METRICS_FILE), usize::MAX).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(split.path().join(LATEST_FILE).exists());
}

#[test]
fn best_checkpoint_is_never_worse_than_the_initialization() {
    let model = small_model(Variant::full());
    let family = tiny_family();
    let spec = TaskSpec::classification(2, 1, 4);
    let scorer = PrototypeScorer::new();
    let init: MetaParams = model.init_meta_params(None, 5).unwrap();
    let t = trainer(&model, &family, &spec, &scorer, 4, 1);
    let out = t.train(init, None).unwrap();
    let ctx = EpisodeContext {
        model: &model,
        scorer: Some(&scorer),
        inner: &t.inner,
        exec: &t.exec,
    };
    let val = t.val_batch().unwrap();
    let best = npbml_core::outer::validate(&ctx, &out.best, &val).unwrap();
    assert!(best.score(TaskKind::Classification) >= out.initial_val.score(TaskKind::Classification));
}
