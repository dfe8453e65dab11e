use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use shotrope::checkpoint::load_records;
use shotrope::data::{SyntheticWorld, TokenField, WorldConfig};
use shotrope::engine::{
    aggregate, init_model, load_model, sample, save_model, score_field, shot_noise, sidecar_path, train,
    RunConfig, SampleOptions, ShotPlan, TrainConfig,
};
use shotrope::model::{DenoiserConfig, Variant};
use shotrope::tensor::Tensor;
use shotrope::Error;

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.world = WorldConfig {
        d_token: 48,
        d_text: 16,
        height: 1,
        width: 2,
        ..WorldConfig::default()
    };
    run.model = DenoiserConfig {
        d_token: 48,
        d_text: 16,
        d_model: 24,
        blocks: 1,
        heads: 2,
        ..DenoiserConfig::default()
    };
    run.train.steps = 5;
    run
}

#[test]
fn one_step_moves_the_output_head() {
    let run = tiny_run();
    let world = SyntheticWorld::new(run.world.clone()).unwrap();
    let before = init_model::<f32>(&run.model, 0).unwrap();
    let cfg = TrainConfig {
        steps: 1,
        ..run.train.clone()
    };
    let out = train(before.clone(), &world, &cfg, |_, _| {}).unwrap();
    assert_eq!(out.log.losses.len(), 1);
    assert!(out.log.losses[0].is_finite() && out.log.losses[0] > 0.0);
    let hb = before.param("head.w").unwrap();
    let ha = out.model.param("head.w").unwrap();
    assert!(hb.data().iter().all(|&x| x == 0.0));
    assert!(ha.data().iter().any(|&x| x != 0.0));
}

#[test]
fn smoothed_loss_falls_during_training() {
    let mut run = RunConfig::ablation_default();
    run.train.batch_size = 2;
    run.train.steps = 2000;
    let world = SyntheticWorld::new(run.world.clone()).unwrap();
    let model = init_model::<f32>(&run.model, run.train.init_seed).unwrap();
    let out = train(model, &world, &run.train, |_, _| {}).unwrap();
    let (early, late) = (out.log.smoothed(100), out.log.smoothed(2000));
    assert!(late < early, "smoothed loss {early} at step 100, {late} at step 2000");
    let csv = out.log.to_csv();
    assert!(csv.starts_with("step,loss,smoothed\n1,"));
    assert_eq!(csv.lines().count(), 2001);
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let run = tiny_run();
    let world = SyntheticWorld::new(run.world.clone()).unwrap();
    let model = init_model::<f32>(&run.model, 0).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        lr: 1e30,
        ..run.train.clone()
    };
    match train(model, &world, &cfg, |_, _| {}) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.losses)),
    }
}

#[test]
fn zero_head_model_returns_the_initial_noise() {
    let run = tiny_run();
    let world = SyntheticWorld::new(run.world.clone()).unwrap();
    let model = init_model::<f32>(&run.model, 3).unwrap();
    let plan = ShotPlan::parse("n=2,scene=1,motion=1;n=3,scene=4").unwrap();
    let opts = SampleOptions {
        steps: 10,
        seed: 12,
        ..SampleOptions::default()
    };
    let out = sample(&model, &world, &plan, &opts).unwrap();
    for s in 0..2 {
        let (a, b) = out.layout.token_span(s);
        let noise: Tensor<f32> = shot_noise(12, s, b - a, 48);
        assert_eq!(out.shot_tokens(s), noise);
    }
}

#[test]
fn clean_renders_score_perfectly_and_noise_scores_at_chance() {
    let world = SyntheticWorld::new(WorldConfig {
        sigma: 0.0,
        ..WorldConfig::default()
    })
    .unwrap();
    let plan = ShotPlan::parse("n=3,scene=0,motion=1;n=2,scene=5,motion=0;n=4,scene=2,motion=3").unwrap();
    let layout = world.layout(plan.frames()).unwrap();
    let field = world.render_sample::<f32>(9, &plan.prompts(), &layout, 0).unwrap();
    let m = aggregate(&[score_field(&world, &field, &plan.prompts()).unwrap()], 0);
    assert!((m.identity_consistency - 1.0).abs() < 1e-4);
    assert_eq!(m.scene_adherence, 1.0);
    assert_eq!(m.cut_accuracy, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<_> = (0..300)
        .map(|_| {
            let tokens = Tensor::<f32>::from_fn(&[layout.token_count(), 128], |_| StandardNormal.sample(&mut rng));
            let f = TokenField::new(layout.clone(), tokens).unwrap();
            score_field(&world, &f, &plan.prompts()).unwrap()
        })
        .collect();
    let m = aggregate(&scores, 0);
    assert!((m.scene_adherence - 0.125).abs() < 0.03, "noise adherence {}", m.scene_adherence);
    assert!(m.identity_consistency.abs() < 0.1);
}

#[test]
fn checkpoints_round_trip_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run();
    run.model.variant = Variant::FullRefAttn;
    let world = SyntheticWorld::new(run.world.clone()).unwrap();
    let model = init_model::<f32>(&run.model, 1).unwrap();
    let model = train(model, &world, &run.train, |_, _| {}).unwrap().model;
    let path = dir.path().join("m.ecsh");
    save_model(&path, &model, &run).unwrap();
    assert!(sidecar_path(&path).is_file());
    let (back, back_run) = load_model::<f32>(&path).unwrap();
    assert_eq!(back_run, run);
    assert_eq!(back.params(), model.params());
    assert_eq!(back.names(), model.names());
    let records = load_records::<f32>(&path).unwrap();
    assert_eq!(records.len(), model.params().len());

    std::fs::remove_file(sidecar_path(&path)).unwrap();
    assert!(matches!(load_model::<f32>(&path), Err(Error::Config(_))));
}

#[test]
fn sidecar_reproduces_training_bit_for_bit() {
    let run = tiny_run();
    let go = |r: &RunConfig| {
        let world = SyntheticWorld::new(r.world.clone()).unwrap();
        let m = init_model::<f32>(&r.model, r.train.init_seed).unwrap();
        train(m, &world, &r.train, |_, _| {}).unwrap()
    };
    let a = go(&run);
    let b = go(&RunConfig::from_json(&run.to_json()).unwrap());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log.losses, b.log.losses);
}
