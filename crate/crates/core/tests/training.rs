mod common;

use pagnerf::config::TrainConfig;
use pagnerf::dataset::{Dataset, NoiseConfig};
use pagnerf::grid::GridConfig;
use pagnerf::model::{ChunkUpstream, FieldGrads};
use pagnerf::scene::{desk, generate};
use pagnerf::trainer::{schedule_events, TrainData, TrainState};

fn tiny_config() -> TrainConfig {
    let grid = GridConfig {
        num_levels: 3,
        capacity: 1 << 10,
        features_per_level: 2,
        base_scale: 4.0,
        finest_scale: 16.0,
        init_range: 1e-4,
    };
    TrainConfig {
        epochs: 12,
        rays_per_image: 48,
        samples_per_ray: 12,
        prune_every: 4,
        voxel_trace_after: 4,
        panoptic_start_epoch: 6,
        register_every: 5,
        register_steps: 2,
        register_rays: 16,
        lr_global: 0.007,
        lr_grid: 0.03,
        lr_pose: 2e-4,
        octree_depth: 5,
        color_grid: grid.clone(),
        panoptic_grid: GridConfig { capacity: 1 << 8, ..grid },
        ..TrainConfig::default()
    }
}

fn tiny_dataset() -> Dataset {
    let noise = NoiseConfig {
        sigma_t: 0.005,
        dropout: 0.2,
        ..NoiseConfig::default()
    };
    generate(&desk().with_frames(6).with_camera_scale(4), &noise, 3).unwrap()
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn checkpoint_bytes(s: &TrainState) -> Vec<u8> {
    let mut b = Vec::new();
    s.write_to(&mut b).unwrap();
    b
}

#[test]
fn steps_return_finite_losses() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let data = TrainData::from_window(&ds, 0, &cfg).unwrap();
    let mut s = TrainState::new(cfg, &data).unwrap();
    for _ in 0..3 {
        let parts = s.train_step(&data).unwrap();
        assert!(parts.named().iter().all(|(_, v)| v.is_finite()));
    }
}

#[test]
fn panoptic_groups_wait_for_their_epoch() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let data = TrainData::from_window(&ds, 0, &cfg).unwrap();
    let mut s = TrainState::new(cfg.clone(), &data).unwrap();
    let sums = |s: &TrainState| {
        (
            s.field.panoptic_grid.checksum(),
            s.field.decoders.semantic.params.clone(),
            s.field.decoders.instance.params.clone(),
        )
    };
    let before = sums(&s);
    let color_before = s.field.color_grid.checksum();
    s.train_until(&data, cfg.panoptic_start_epoch, |_| {}).unwrap();
    assert_eq!(sums(&s), before);
    assert_ne!(s.field.color_grid.checksum(), color_before);
    assert!(s.log.iter().all(|l| l.parts.semantic == 0.0 && l.parts.things == 0.0));

    s.train_until(&data, cfg.panoptic_start_epoch + 1, |_| {}).unwrap();
    let after = sums(&s);
    assert_ne!(after.0, before.0);
    assert_ne!(after.1, before.1);
    assert_ne!(after.2, before.2);
}

/// Every entry an Adam step touches for the first time moves by exactly its
/// group's learning rate.
fn assert_first_step(name: &str, before: &[f64], after: &[f64], lr: f64) {
    let mut moved = 0;
    for (a, b) in before.iter().zip(after) {
        let d = (a - b).abs();
        if d == 0.0 {
            continue;
        }
        moved += 1;
        assert!(d <= lr * (1.0 + 1e-9), "{name}: step {d} exceeds rate {lr}");
    }
    assert!(moved > 0, "{name}: nothing moved");
    let max = before.iter().zip(after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!((max - lr).abs() <= lr * 1e-6, "{name}: largest step {max}, rate {lr}");
}

fn pose_params(s: &TrainState) -> Vec<f64> {
    s.poses.iter().zip(&s.train).filter(|(_, &t)| t).flat_map(|(p, _)| p.as_array()).collect()
}

#[test]
fn learning_rates_route_to_their_groups() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let data = TrainData::from_window(&ds, 0, &cfg).unwrap();
    let mut s = TrainState::new(cfg.clone(), &data).unwrap();
    let grid = s.field.color_grid.table.clone();
    let density = s.field.decoders.density.params.clone();
    let color = s.field.decoders.color.params.clone();
    let poses = pose_params(&s);
    s.train_step(&data).unwrap();
    assert_first_step("color grid", &grid, &s.field.color_grid.table, cfg.lr_grid);
    assert_first_step("density head", &density, &s.field.decoders.density.params, cfg.lr_global);
    assert_first_step("color head", &color, &s.field.decoders.color.params, cfg.lr_global);
    assert_first_step("train poses", &poses, &pose_params(&s), cfg.lr_pose);

    // the panoptic groups take their first step once their stage begins
    s.epoch = cfg.panoptic_start_epoch;
    let pgrid = s.field.panoptic_grid.table.clone();
    let sem = s.field.decoders.semantic.params.clone();
    let inst = s.field.decoders.instance.params.clone();
    s.train_step(&data).unwrap();
    assert_first_step("panoptic grid", &pgrid, &s.field.panoptic_grid.table, cfg.lr_grid);
    assert_first_step("semantic head", &sem, &s.field.decoders.semantic.params, cfg.lr_global);
    assert_first_step("instance head", &inst, &s.field.decoders.instance.params, cfg.lr_global);
}

#[test]
fn frozen_poses_stay_put() {
    let ds = tiny_dataset();
    let cfg = TrainConfig {
        optimize_poses: false,
        ..tiny_config()
    };
    let data = TrainData::from_window(&ds, 0, &cfg).unwrap();
    let mut s = TrainState::new(cfg, &data).unwrap();
    let poses = pose_params(&s);
    s.train_until(&data, 3, |_| {}).unwrap();
    assert_eq!(pose_params(&s), poses);
}

#[test]
fn panoptic_backward_leaves_color_branch_and_poses_alone() {
    for seed in [1, 2] {
        let mut setup = common::Setup::new(seed);
        setup.up_rgb.iter_mut().for_each(|u| *u = [0.0; 3]);
        let fwd = setup.field.forward_chunk(setup.batch.clone(), &setup.opts, true);
        let up = ChunkUpstream {
            rgb: &setup.up_rgb,
            semantic: &setup.up_sem,
            instance: &setup.up_inst,
        };
        let g = setup.field.backward_chunk(&fwd, up, &setup.opts, true).unwrap();
        let mut grads = FieldGrads::zeros(&setup.field);
        grads.accumulate(&g);
        assert!(grads.color_grid.iter().all(|&v| v == 0.0));
        assert!(grads.density.iter().all(|&v| v == 0.0));
        assert!(grads.color.iter().all(|&v| v == 0.0));
        assert!(g.d_origin.iter().chain(&g.d_dir).all(|v| v.iter().all(|&x| x == 0.0)));
        assert!(grads.panoptic_grid.iter().any(|&v| v != 0.0));
        assert!(grads.semantic.iter().any(|&v| v != 0.0));
        assert!(grads.instance.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let data = TrainData::from_window(&ds, 0, &cfg).unwrap();
    let (whole, resumed) = single_threaded(|| {
        let mut a = TrainState::new(cfg.clone(), &data).unwrap();
        a.train_until(&data, cfg.epochs, |_| {}).unwrap();

        let mut b = TrainState::new(cfg.clone(), &data).unwrap();
        b.train_until(&data, 5, |_| {}).unwrap();
        let bytes = checkpoint_bytes(&b);
        let mut c = TrainState::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(checkpoint_bytes(&c), bytes);
        c.train_until(&data, cfg.epochs, |_| {}).unwrap();
        (checkpoint_bytes(&a), checkpoint_bytes(&c))
    });
    assert!(whole == resumed, "resumed checkpoint differs");
}

#[test]
fn schedule_matches_the_documented_epochs() {
    let cfg = TrainConfig::default();
    let e = schedule_events(199, &cfg);
    assert!(!e.prune && !e.voxel_switch && !e.register);
    let e = schedule_events(200, &cfg);
    assert!(e.prune && e.voxel_switch);
    let e = schedule_events(210, &cfg);
    assert!(!e.prune && !e.voxel_switch && e.register);
    let e = schedule_events(400, &cfg);
    assert!(e.prune && !e.voxel_switch);
}
