use std::fs;
use std::path::Path;

use pagnerf::dataset::{export_dataset, load_dataset, NoiseConfig};
use pagnerf::scene::{analytic_render, desk, generate, make_detections, perturb_poses, Hit, ScenePreset, MAX_DETECTION_ID};
use pagnerf::types::{pixel_ray, PoseSE3, Vec3};
use pagnerf::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_desk() -> ScenePreset {
    desk().with_frames(6)
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn export_load_round_trip() {
    let noise = NoiseConfig {
        sigma_t: 0.01,
        sigma_r_deg: 0.5,
        dropout: 0.2,
        ..NoiseConfig::default()
    };
    let ds = generate(&small_desk(), &noise, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.frames.len(), ds.frames.len());
    assert_eq!(back.camera, ds.camera);
    assert_eq!(back.schema, ds.schema);
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in ds.frames.iter().zip(&back.frames) {
        assert_eq!(a.rgb.width, b.rgb.width);
        assert_eq!(a.rgb.height, b.rgb.height);
        assert_eq!(a.sem_det, b.sem_det);
        assert_eq!(a.inst_det, b.inst_det);
        // PNG storage quantizes colors to 8 bits and confidences to 16
        for (x, y) in a.rgb.data.iter().zip(&b.rgb.data) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        for (x, y) in a.conf.data.iter().zip(&b.conf.data) {
            assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert!((a.pose_init.translation - b.pose_init.translation).norm() < 1e-12);
        assert!((a.pose_init.rotation - b.pose_init.rotation).norm() < 1e-12);
    }
    for (a, b) in ds.gt.iter().zip(&back.gt) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.sem, b.sem);
        assert_eq!(a.inst, b.inst);
        for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
            assert!((x - y).abs() <= 0.5e-3 + 1e-9);
        }
    }
    let gp = back.gt_poses.unwrap();
    for (a, b) in ds.gt_poses.unwrap().iter().zip(&gp) {
        assert!((a.translation - b.translation).norm() < 1e-12);
    }
}

#[test]
fn exports_with_one_seed_are_byte_identical() {
    let noise = NoiseConfig {
        sigma_t: 0.01,
        dropout: 0.3,
        conf_noise: 0.2,
        ..NoiseConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export_dataset(&generate(&small_desk(), &noise, 9).unwrap(), a.path()).unwrap();
    export_dataset(&generate(&small_desk(), &noise, 9).unwrap(), b.path()).unwrap();
    assert_eq!(all_files(a.path()), all_files(b.path()));
}

#[test]
fn twelve_frames_alternate_train_and_validation() {
    let ds = generate(&desk(), &NoiseConfig::default(), 0).unwrap();
    let m = ds.manifest.unwrap();
    assert_eq!(m.num_frames, 12);
    for (i, &t) in m.train.iter().enumerate() {
        assert_eq!(t, i % 2 == 0);
    }
    assert!(m.train[m.windows[0].middle]);
}

#[test]
fn corrupt_pose_file_names_the_path() {
    let ds = generate(&desk().with_frames(2), &NoiseConfig::default(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let bad = dir.path().join("frames").join("00001.pose.txt");
    fs::write(&bad, "1 0 0 0\n0 1 0 0\n").unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Load { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected a load error, got {:?}", other.map(|d| d.frames.len())),
    }
    // a non-orthonormal rotation is rejected as well
    fs::write(&bad, "2 0 0 0\n0 1 0 0\n0 0 1 0\n").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn instance_map_is_the_closest_hit_partition() {
    let p = desk();
    let pose = p.trajectory.poses()[5];
    let g = analytic_render(&p.scene, &p.camera, &pose).unwrap();
    for row in 0..p.camera.height {
        for col in 0..p.camera.width {
            let ray = pixel_ray(&p.camera, &pose, (col, row)).unwrap();
            // independent closest hit over every sphere by the quadratic formula
            let mut best = (f64::INFINITY, 0u16);
            for s in &p.scene.spheres {
                let oc = ray.origin - s.center;
                let b = oc.dot(&ray.direction);
                let disc = b * b - (oc.norm_squared() - s.radius * s.radius);
                if disc >= 0.0 {
                    let t = -b - disc.sqrt();
                    if t > 0.0 && t < best.0 {
                        best = (t, s.instance);
                    }
                }
            }
            let scene_t = match p.scene.closest_hit(&ray) {
                Some(Hit::Slab { .. }) | None => f64::INFINITY,
                Some(h) => h.t(),
            };
            let inst = *g.inst.get(col, row);
            if best.0.is_finite() {
                assert_eq!(inst, best.1, "pixel ({col},{row})");
                assert!((scene_t - best.0).abs() < 1e-9);
                assert!((g.depth.get(col, row) - best.0).abs() < 1e-9);
            } else {
                assert_eq!(inst, 0, "pixel ({col},{row})");
            }
        }
    }
}

#[test]
fn shuffled_ids_are_fresh_and_dropout_rate_matches() {
    let p = desk();
    let poses = p.trajectory.poses();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut kept, mut total) = (0usize, 0usize);
    for k in 0..100 {
        let g = analytic_render(&p.scene, &p.camera, &poses[k % poses.len()]).unwrap();
        let mut present: Vec<u16> = g.inst.data.iter().copied().filter(|&i| i != 0).collect();
        present.sort_unstable();
        present.dedup();

        let (_, inst, _) = make_detections(&g, &p.scene.schema, &mut rng, 0.0, true, 0.0);
        // every object maps to one detection id and no two objects share one
        let mut map = std::collections::BTreeMap::new();
        for (a, b) in g.inst.data.iter().zip(&inst.data) {
            assert_eq!(*a == 0, *b == 0);
            if *a != 0 {
                assert!(*b <= MAX_DETECTION_ID);
                assert_eq!(*map.entry(*a).or_insert(*b), *b);
            }
        }
        assert_eq!(map.len(), present.len());
        let mut ids: Vec<u16> = map.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), present.len());

        let (_, inst, _) = make_detections(&g, &p.scene.schema, &mut rng, 0.3, true, 0.0);
        let mut survivors: Vec<u16> = inst.data.iter().copied().filter(|&i| i != 0).collect();
        survivors.sort_unstable();
        survivors.dedup();
        total += present.len();
        kept += survivors.len();
    }
    let rate = 1.0 - kept as f64 / total as f64;
    assert!((rate - 0.3).abs() <= 0.05, "drop rate {rate} over {total} masks");
}

#[test]
fn translation_noise_has_the_requested_spread() {
    let poses = vec![PoseSE3::from_translation(Vec3::new(0.2, -0.1, 0.3)); 1000];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = perturb_poses(&poses, 0.01, 0.5, &mut rng).unwrap();
    for axis in 0..3 {
        let d: Vec<f64> = noisy.iter().zip(&poses).map(|(n, p)| n.translation[axis] - p.translation[axis]).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((std - 0.01).abs() < 0.001, "axis {axis}: std {std}");
    }
    for n in &noisy {
        let e = n.rotation.transpose() * n.rotation - nalgebra::Matrix3::identity();
        assert!(e.norm() < 1e-9);
        assert!((n.rotation.determinant() - 1.0).abs() < 1e-9);
    }
    let same = perturb_poses(&poses[..3], 0.0, 0.0, &mut rng).unwrap();
    assert_eq!(same, poses[..3].to_vec());
}
