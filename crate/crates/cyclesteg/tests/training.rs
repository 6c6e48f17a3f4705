//! Training loop behavior: overfitting, determinism, checkpoint round trips,
//! and abort on non-finite losses.

mod common;

use cyclesteg::checkpoint::Checkpoint;
use cyclesteg::nets::Generator;
use cyclesteg::tape::Tape;
use cyclesteg::tensor::Tensor;
use cyclesteg::trainer::{
    evaluate, generator_grads, to_model, train, train_with_models, GanMode, ModelConfig, Models,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cyclesteg::synthdata::{render_map, render_photo, sample_scene, SceneGenParams};

fn scene_pair(seed: u64) -> (Tensor, Tensor) {
    let scene = sample_scene(seed, &SceneGenParams::default());
    (render_photo(&scene), render_map(&scene))
}

fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        seed,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    }
}

#[test]
fn overfit_single_pair_drives_cycle_loss_down() {
    // One photo and one map, 350 steps: reconstruction becomes near-perfect.
    let (photo, map) = scene_pair(100);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 350,
        batch_size: 1,
        lr: 1e-3,
        seed: 5,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &[photo], &[map], dir.path()).unwrap();
    let last = out.history.last().unwrap();
    assert!(
        last.cycle_loss < 0.07,
        "cycle loss after 350 steps: {}",
        last.cycle_loss
    );
}

#[test]
fn zero_cycle_weight_removes_cycle_term_from_gradient() {
    // generator_grads with lambda_cyc = 0 must equal the gradient of an
    // adversarial-only objective built independently on a fresh tape.
    let models = Models::build(ModelConfig::default(), 77).unwrap();
    let (photo, map) = scene_pair(200);
    let x = to_model(&photo);
    let y = to_model(&map);
    let (gf, gg, _, _) =
        generator_grads(&models, &x, &y, 0.0, GanMode::LeastSquares, false).unwrap();

    let mut tape = Tape::new();
    let pvf = models.gen_f.params.register(&mut tape, true);
    let pvg = models.gen_g.params.register(&mut tape, true);
    let pdx = models.disc_x.params.register(&mut tape, false);
    let pdy = models.disc_y.params.register(&mut tape, false);
    let xv = tape.leaf(x, false);
    let yv = tape.leaf(y, false);
    let fake_y = models.gen_f.forward_on(&mut tape, &pvf, xv).unwrap();
    let fake_y_vis = tape.slice_channels(fake_y, 0, 3).unwrap();
    let dfy = models.disc_y.forward_on(&mut tape, &pdy, fake_y_vis).unwrap();
    let shape = tape.value(dfy).shape().to_vec();
    let ones_y = tape.leaf(Tensor::full(&shape, 1.0), false);
    let adv_y = tape.mse_loss(dfy, ones_y).unwrap();
    let fake_x = models.gen_g.forward_on(&mut tape, &pvg, yv).unwrap();
    let dfx = models.disc_x.forward_on(&mut tape, &pdx, fake_x).unwrap();
    let shape = tape.value(dfx).shape().to_vec();
    let ones_x = tape.leaf(Tensor::full(&shape, 1.0), false);
    let adv_x = tape.mse_loss(dfx, ones_x).unwrap();
    let total = tape.add(adv_x, adv_y).unwrap();
    let grads = tape.backward(total).unwrap();

    for (a, v) in gf.iter().zip(&pvf) {
        assert_eq!(a.as_ref(), grads.get(*v), "gen_f gradient differs");
    }
    for (a, v) in gg.iter().zip(&pvg) {
        assert_eq!(a.as_ref(), grads.get(*v), "gen_g gradient differs");
    }
}

#[test]
fn equal_seeds_give_equal_loss_curves() {
    let pairs: Vec<_> = (300..304).map(scene_pair).collect();
    let xs: Vec<_> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let ys: Vec<_> = pairs.iter().map(|(_, m)| m.clone()).collect();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&tiny_cfg(2, 9), &xs, &ys, d1.path()).unwrap();
    let b = train(&tiny_cfg(2, 9), &xs, &ys, d2.path()).unwrap();
    assert_eq!(a.history, b.history);
    let d3 = tempfile::tempdir().unwrap();
    let c = train(&tiny_cfg(1, 10), &xs, &ys, d3.path()).unwrap();
    assert_ne!(a.history[0], c.history[0]);
}

#[test]
fn checkpoint_round_trip_forward_is_bit_identical() {
    let models = Models::build(ModelConfig::default(), 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.cstg");
    models
        .to_checkpoint(0, &TrainConfig::default(), &[])
        .save(&path)
        .unwrap();
    let back = Models::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let x = common::rand_tensor(&mut rng, &[3, 48, 48], -1.0, 1.0);
        assert_eq!(models.gen_f.forward(&x).unwrap(), back.gen_f.forward(&x).unwrap());
        assert_eq!(models.gen_g.forward(&x).unwrap(), back.gen_g.forward(&x).unwrap());
        assert_eq!(models.disc_x.forward(&x).unwrap(), back.disc_x.forward(&x).unwrap());
        assert_eq!(models.disc_y.forward(&x).unwrap(), back.disc_y.forward(&x).unwrap());
    }
}

#[test]
fn training_aborts_on_non_finite_loss() {
    let mut models = Models::build(ModelConfig::default(), 1).unwrap();
    models.gen_f.params.get_mut("enc0.weight").data_mut()[0] = f64::NAN;
    let (photo, map) = scene_pair(400);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    };
    let err = match train_with_models(&cfg, models, &[photo], &[map], dir.path()) {
        Err(e) => e,
        Ok(_) => panic!("training with a NaN parameter did not abort"),
    };
    assert!(
        matches!(err, cyclesteg::Error::NonFiniteLoss { epoch: 1, step: 0 }),
        "unexpected error: {err}"
    );
}

#[test]
fn untrained_generators_have_high_cycle_loss() {
    let probe: Vec<_> = (500..505)
        .map(|s| {
            let (p, m) = scene_pair(s);
            (s, p, m)
        })
        .collect();
    for seed in 0..10 {
        let models = Models::build(ModelConfig::default(), seed).unwrap();
        let report = evaluate(&models, &probe).unwrap();
        let total = report.cycle_l1_x + report.cycle_l1_y;
        assert!(total > 0.3, "seed {seed}: cycle at init {total}");
    }
}

#[test]
fn identity_stub_evaluation_has_equal_leak_components() {
    // With F = G = identity the "map" is the photo itself: whatever detail
    // change survives into GFx is exactly as visible in Fx, so the leak
    // score vanishes.
    let probe: Vec<_> = (600..610)
        .map(|s| {
            let (p, m) = scene_pair(s);
            (s, p, m)
        })
        .collect();
    let id = |x: &Tensor| -> cyclesteg::Result<Tensor> { Ok(x.clone()) };
    let report = cyclesteg::trainer::evaluate_fns(&id, &id, &probe).unwrap();
    assert_eq!(report.cycle_l1_x, 0.0);
    assert_eq!(report.cycle_l1_y, 0.0);
    // fidelity is 1 by construction; visibility differs only through the
    // local-mean filter, which passes the dot-scale detail changes through.
    assert!((report.leak_fidelity - 1.0).abs() < 1e-12);
    assert!(report.leak_score.abs() < 0.5, "score {}", report.leak_score);
}

#[test]
fn generator_param_budget_is_desk_scale() {
    let cfg = cyclesteg::nets::GeneratorConfig::default();
    let n = Generator::expected_param_count(&cfg);
    assert!(n < 250_000, "generator has {n} params");
}
