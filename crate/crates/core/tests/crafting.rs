mod common;

use common::*;
use crosspatch::capture::CaptureParams;
use crosspatch::crafting::*;
use crosspatch::data::{build_dataset, Dataset};
use crosspatch::numerics::{fd_gradient, max_relative_error, Grid};
use crosspatch::objectives::{cosine_distance, AttackMode};
use crosspatch::recognizers::{msdife_embed, victim_forward, EncoderModel, VictimModel};
use crosspatch::renderer::{asit_forward, composite, composite_kink_distance, Placement};
use crosspatch::topology::{make_mask, Topology};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = vec![0.3, -1.0];
    let mut s = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
    assert_eq!(p, vec![0.3, -1.0]);
    assert_eq!(s.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = vec![1.0];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[1.0], &mut s, 1e-3).unwrap();
    assert!((1.0 - p[0] - 1e-3).abs() < 1e-10);
    let mut q = vec![1.0];
    let mut s2 = AdamState::new(1);
    adam_step(&mut q, &[1.0], &mut s2, 1e-3).unwrap();
    assert_eq!(p, q);
    assert_eq!(s, s2);
}

#[test]
fn adam_rejects_non_finite_and_mismatch() {
    let mut p = vec![0.0; 2];
    let mut s = AdamState::new(2);
    assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 0.1).is_err());
    assert!(adam_step(&mut p, &[0.0], &mut s, 0.1).is_err());
    assert_eq!(s.step, 0);
}

proptest! {
    #[test]
    fn projection_is_idempotent(values in proptest::collection::vec(-2.0f64..3.0, 16)) {
        let mut once = Grid::new(4, 4, values).unwrap();
        project_unit(&mut once);
        let mut twice = once.clone();
        project_unit(&mut twice);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.is_unit_range());
    }
}

fn toy_config(mask: crosspatch::topology::PatchMask) -> CraftConfig {
    let mut c = CraftConfig::new(mask);
    c.iterations = 3;
    c.batch_size = 2;
    c.capture.k = 1;
    c.lr = 0.01;
    c
}

struct Scene {
    victim: VictimModel,
    encoder: EncoderModel,
    xs: Vec<Grid>,
    labels: Vec<usize>,
    clean: Vec<Vec<f64>>,
    xi: CaptureParams,
}

const MARGIN: f64 = 1e-3;

/// Returns false when any hinge, clamp or bilinear kink lies near the point.
fn clear_of_kinks(scene: &Scene, cfg: &CraftConfig, texture: &Grid, phi: &[f64], asit_seed: u64) -> bool {
    let asit = random_asit(8, asit_seed, 0.5).with_params(phi.to_vec()).unwrap();
    for (i, x) in scene.xs.iter().enumerate() {
        let params = asit_forward(x, &asit, &cfg.bounds).unwrap();
        if composite_kink_distance(x, texture, &cfg.mask.mask, &params, Placement::Center) < MARGIN {
            return false;
        }
        let x_hat = composite(x, texture, &cfg.mask.mask, &params, Placement::Center).unwrap();
        let x_til = crosspatch::capture::apply_capture(&x_hat, &scene.xi);
        if x_til.values().iter().any(|&v| v < MARGIN || v > 1.0 - MARGIN) {
            return false;
        }
        let z = victim_forward(&scene.victim, &x_til).unwrap();
        let mut others: Vec<f64> = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != scene.labels[i])
            .map(|(_, &v)| v)
            .collect();
        others.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if (z[scene.labels[i]] - others[0] + cfg.margins.kappa).abs() < MARGIN || others[0] - others[1] < MARGIN {
            return false;
        }
        let g = msdife_embed(&scene.encoder, &x_til).unwrap().g;
        if (cfg.margins.m - cosine_distance(&scene.clean[i], &g).unwrap()).abs() < MARGIN {
            return false;
        }
    }
    true
}

#[test]
fn joint_gradient_matches_fd_on_toy_scene() {
    let mut r = rng(11);
    let mask = make_mask(Topology::Cross, 5, 0.4).unwrap();
    let mut cfg = toy_config(mask);
    cfg.weights.lambda_tv = 0.05;
    cfg.weights.lambda_vis = 0.5;
    cfg.margins.m = 0.02;
    let xs: Vec<Grid> = (0..2).map(|_| random_grid(8, 8, 0.2, 0.8, &mut r)).collect();
    let encoder = toy_encoder(8, 3);
    let scene = Scene {
        victim: toy_victim(8, 3, 2, "toy"),
        clean: xs.iter().map(|x| msdife_embed(&encoder, x).unwrap().g).collect(),
        encoder,
        xs,
        labels: vec![0, 2],
        xi: CaptureParams { gamma: 1.05, delta: 0.02, sigma: 0.01, noise_seed: 9 },
    };
    let victims = std::slice::from_ref(&scene.victim);
    let objective = CraftObjective { victims, encoder: &scene.encoder, config: &cfg };
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 {
        attempts += 1;
        assert!(attempts < 200, "could not find kink-free probe points");
        let asit_seed = r.random_range(0..1000);
        let asit = random_asit(8, asit_seed, 0.5);
        let texture = random_grid(5, 5, 0.1, 0.9, &mut r);
        if !clear_of_kinks(&scene, &cfg, &texture, &asit.params, asit_seed) {
            continue;
        }
        let samples = |_: ()| -> Vec<SampleInput<'_>> {
            (0..2)
                .map(|i| SampleInput {
                    x: &scene.xs[i],
                    label: scene.labels[i],
                    g_clean: Some(&scene.clean[i]),
                    captures: vec![scene.xi],
                })
                .collect()
        };
        let (_, grad) = objective.batch(&texture, &asit, &samples(())).unwrap();
        let joint: Vec<f64> = texture.values().iter().chain(&asit.params).copied().collect();
        let fd = fd_gradient(
            |v| {
                let t = Grid::new(5, 5, v[..25].to_vec()).unwrap();
                let a = asit.with_params(v[25..].to_vec()).unwrap();
                objective.batch(&t, &a, &samples(())).unwrap().0.total
            },
            &joint,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&grad, &fd);
        assert!(err < 1e-4, "relative error {err}");
        assert!(grad[25..].iter().any(|g| *g != 0.0), "renderer gradient should be live");
        checked += 1;
    }
}

#[test]
fn eot_with_duplicate_draws_equals_single_draw() {
    let mut r = rng(4);
    let mask = make_mask(Topology::Square, 5, 0.25).unwrap();
    let cfg = toy_config(mask);
    let victim = toy_victim(8, 3, 1, "toy");
    let encoder = toy_encoder(8, 1);
    let x = random_grid(8, 8, 0.1, 0.9, &mut r);
    let clean = msdife_embed(&encoder, &x).unwrap().g;
    let xi = CaptureParams { gamma: 0.9, delta: 0.05, sigma: 0.02, noise_seed: 3 };
    let texture = random_grid(5, 5, 0.0, 1.0, &mut r);
    let asit = random_asit(8, 5, 0.5);
    let victims = std::slice::from_ref(&victim);
    let objective = CraftObjective { victims, encoder: &encoder, config: &cfg };
    let run = |captures: Vec<CaptureParams>| {
        let s = [SampleInput { x: &x, label: 1, g_clean: Some(&clean), captures }];
        objective.batch(&texture, &asit, &s).unwrap()
    };
    assert_eq!(run(vec![xi]), run(vec![xi, xi]));
}

fn toy_dataset() -> Dataset {
    build_dataset(3, 4, 0.5, 21, 32).unwrap()
}

#[test]
fn craft_is_deterministic_and_keeps_texture_in_range() {
    let ds = toy_dataset();
    let victim = toy_victim(32, 3, 1, "v");
    let encoder = toy_encoder(32, 2);
    let before = encoder.weights.clone();
    let mut cfg = toy_config(make_mask(Topology::Cross, 10, 0.25).unwrap());
    cfg.iterations = 1;
    let a = craft_patch(&cfg, &ds, &victim, &encoder).unwrap();
    let b = craft_patch(&cfg, &ds, &victim, &encoder).unwrap();
    assert_eq!(a, b);
    assert_eq!(encoder.weights, before);

    cfg.iterations = 4;
    cfg.lr = 0.5;
    let c = craft_patch(&cfg, &ds, &victim, &encoder).unwrap();
    assert!(c.texture.is_unit_range());
    assert_eq!(c.trace.len(), 4);
    assert_eq!(encoder.weights, before);
}

#[test]
fn ensemble_of_duplicates_matches_single_model() {
    let ds = toy_dataset();
    let victim = toy_victim(32, 3, 1, "v");
    let encoder = toy_encoder(32, 2);
    let cfg = toy_config(make_mask(Topology::Cross, 10, 0.25).unwrap());
    let single = craft_patch(&cfg, &ds, &victim, &encoder).unwrap();
    let one = craft_ensemble(&cfg, &ds, std::slice::from_ref(&victim), &encoder).unwrap();
    assert_eq!(single, one);
    let twin = craft_ensemble(&cfg, &ds, &[victim.clone(), victim.clone()], &encoder).unwrap();
    for (a, b) in single.trace.iter().zip(&twin.trace) {
        assert_eq!(a.total, b.total);
    }
    assert_eq!(single.texture, twin.texture);
}

#[test]
fn craft_rejects_bad_inputs() {
    let ds = toy_dataset();
    let encoder = toy_encoder(32, 2);
    let cfg = toy_config(make_mask(Topology::Cross, 10, 0.25).unwrap());
    let wrong_classes = toy_victim(32, 4, 1, "v4");
    assert!(craft_patch(&cfg, &ds, &wrong_classes, &encoder).is_err());
    assert!(craft_ensemble(&cfg, &ds, &[], &encoder).is_err());
    let mut empty = ds.clone();
    empty.train.clear();
    assert!(craft_patch(&cfg, &empty, &toy_victim(32, 3, 1, "v"), &encoder).is_err());
    let mut targeted = cfg.clone();
    targeted.mode = AttackMode::Targeted { target: 1, prototype: None };
    assert!(craft_patch(&targeted, &ds, &toy_victim(32, 3, 1, "v"), &encoder).is_err());
    let mut zero_t = cfg.clone();
    zero_t.iterations = 0;
    assert!(craft_patch(&zero_t, &ds, &toy_victim(32, 3, 1, "v"), &encoder).is_err());
}

#[test]
fn disabled_renderer_keeps_identity_parameters() {
    let ds = toy_dataset();
    let mut cfg = toy_config(make_mask(Topology::Cross, 10, 0.25).unwrap());
    Components { asit: false, msdife: false, ras: false }.apply(&mut cfg);
    assert_eq!(cfg.weights.lambda_id, 0.0);
    assert_eq!(cfg.capture.k, 1);
    let b = craft_patch(&cfg, &ds, &toy_victim(32, 3, 1, "v"), &toy_encoder(32, 2)).unwrap();
    assert!(!b.asit_enabled);
    let init = crosspatch::renderer::AsitWeights::init(32, 32, 0).unwrap();
    assert_eq!(b.asit.net, init.net);
    let p = b.render_params(&ds.test[0].pixels).unwrap();
    assert_eq!(p, crosspatch::renderer::RenderParams::IDENTITY);
}

#[test]
fn component_grid_has_eight_distinct_rows() {
    let grid = Components::grid();
    assert_eq!(grid.len(), 8);
    assert_eq!(grid[0].label(), "base");
    assert_eq!(grid[7], Components::FULL);
    let mut labels: Vec<String> = grid.iter().map(Components::label).collect();
    labels.dedup();
    assert_eq!(labels.len(), 8);
}

#[test]
fn bundle_round_trips_through_directory() {
    let ds = toy_dataset();
    let cfg = toy_config(make_mask(Topology::Triangle, 9, 0.25).unwrap());
    let b = craft_patch(&cfg, &ds, &toy_victim(32, 3, 1, "v"), &toy_encoder(32, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    for f in ["texture.pfm", "mask.pgm", "asit.wts", "meta.tsv", "trace.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = PatchBundle::load(dir.path()).unwrap();
    assert_eq!(back.texture, b.texture);
    assert_eq!(back.mask, b.mask);
    assert_eq!(back.asit, b.asit);
    assert_eq!(back.bounds, b.bounds);
    assert_eq!(back.hash(), b.hash());
    assert_eq!(back.trace, checkpoint_rows(&b.trace));
    let missing = PatchBundle::load(&dir.path().join("nope")).unwrap_err();
    assert!(missing.to_string().contains("bundle not found"));
}

#[test]
fn random_control_keeps_geometry() {
    let ds = toy_dataset();
    let cfg = toy_config(make_mask(Topology::Cross, 10, 0.25).unwrap());
    let b = craft_patch(&cfg, &ds, &toy_victim(32, 3, 1, "v"), &toy_encoder(32, 2)).unwrap();
    let c = b.random_control(5);
    assert_eq!(c.mask, b.mask);
    assert_eq!(c.asit, b.asit);
    assert_ne!(c.texture, b.texture);
    assert_ne!(c.hash(), b.hash());
    assert_eq!(c, b.random_control(5));
}

#[test]
fn adversarial_loss_trends_down_over_a_desk_run() {
    use crosspatch::capture::CaptureDistribution;
    use crosspatch::recognizers::{train_victim, TrainConfig, VictimArch, VictimHead};

    let ds = build_dataset(6, 8, 0.5, 22, 32).unwrap();
    let arch = VictimArch { channels: [4, 8, 8], head: VictimHead::GlobalPool };
    let tc = TrainConfig { epochs: 30, batch_size: 8, ..TrainConfig::default() };
    let victim = train_victim(&ds, &arch, &tc, "v").unwrap();
    let encoder = toy_encoder(32, 2);
    let mut cfg = CraftConfig::new(make_mask(Topology::Cross, 12, 0.25).unwrap());
    cfg.iterations = 200;
    cfg.batch_size = ds.train.len();
    cfg.capture = CaptureDistribution::identity(1);
    cfg.lr = 0.01;
    cfg.weights.lambda_id = 0.0;
    cfg.weights.lambda_vis = 0.0;
    cfg.weights.lambda_tv = 0.0;
    let bundle = craft_patch(&cfg, &ds, &victim, &encoder).unwrap();
    let adv: Vec<f64> = bundle.trace.iter().map(|r| r.adv).collect();
    assert_eq!(adv.len(), 200);
    let blocks: Vec<f64> = adv.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{blocks:?}");
    }
}
