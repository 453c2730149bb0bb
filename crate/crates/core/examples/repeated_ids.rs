//! Two identical fruits farther apart than the camera's view: with the ID
//! window they are forced into disjoint slot ranges, without it they may
//! end up sharing one id.

use std::collections::BTreeMap;

use pagnerf::config::TrainConfig;
use pagnerf::dataset::NoiseConfig;
use pagnerf::render::postprocess_panoptic;
use pagnerf::scene::{generate, twins};
use pagnerf::trainer::{TrainData, TrainState};

fn main() -> pagnerf::Result<()> {
    let ds = generate(&twins(), &NoiseConfig::default(), 1)?;
    for id_window in [true, false] {
        let mut cfg = TrainConfig::desk();
        for (k, v) in [
            ("epochs", "240"),
            ("prune_every", "80"),
            ("voxel_trace_after", "80"),
            ("panoptic_start_epoch", "80"),
            ("rays_per_image", "256"),
            ("color_grid.log2_capacity", "12"),
            ("panoptic_grid.log2_capacity", "10"),
        ] {
            cfg.set(k, v)?;
        }
        cfg.optimize_poses = false;
        cfg.register_validation = false;
        cfg.id_window = id_window;
        let data = TrainData::from_window(&ds, 0, &cfg)?;
        let mut s = TrainState::new(cfg, &data)?;
        s.run(&data, |_| {})?;

        // ground-truth object -> predicted id -> pixel count
        let mut votes: BTreeMap<u16, BTreeMap<u16, usize>> = BTreeMap::new();
        for i in 0..data.frames.len() {
            let r = s.render(&s.pose(i)?)?;
            let pred = postprocess_panoptic(&r.instance);
            let gt = &data.gt[i].as_ref().expect("synthetic ground truth").inst;
            for (&p, &g) in pred.data.iter().zip(&gt.data) {
                if g != 0 {
                    *votes.entry(g).or_default().entry(p).or_default() += 1;
                }
            }
        }
        println!("id window {id_window}:");
        for (g, v) in &votes {
            println!("  fruit {g}: predicted ids {v:?}");
        }
    }
    Ok(())
}
