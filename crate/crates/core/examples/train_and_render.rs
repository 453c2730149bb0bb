//! Trains one window of a half-resolution desk scene, saves the checkpoint,
//! and renders a held-out view.
//!
//! cargo run --release --example train_and_render -- out_dir

use std::path::PathBuf;

use pagnerf::config::TrainConfig;
use pagnerf::dataset::{write_rgb_png, write_u16_png, NoiseConfig};
use pagnerf::metrics::psnr;
use pagnerf::scene::{desk, generate};
use pagnerf::trainer::{TrainData, TrainState};

fn main() -> pagnerf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_and_render".into()));
    std::fs::create_dir_all(&out).map_err(|e| pagnerf::Error::Io { path: out.clone(), source: e })?;
    let ds = generate(&desk().with_camera_scale(2), &NoiseConfig::default(), 0)?;

    let mut cfg = TrainConfig::desk();
    for (k, v) in [("epochs", "300"), ("prune_every", "150"), ("voxel_trace_after", "150"), ("panoptic_start_epoch", "150")] {
        cfg.set(k, v)?;
    }
    cfg.optimize_poses = false;
    let data = TrainData::from_window(&ds, 0, &cfg)?;
    let mut state = TrainState::new(cfg, &data)?;
    let t = std::time::Instant::now();
    state.run(&data, |l| {
        if (l.epoch + 1) % 50 == 0 {
            println!("epoch {:>4}  color {:.2e}  occupied leaves {}", l.epoch + 1, l.parts.color, l.occupied_leaves);
        }
    })?;
    println!("trained in {:.1} s", t.elapsed().as_secs_f64());
    state.save(&out.join("window_0.ckpt"))?;

    let reloaded = TrainState::load(&out.join("window_0.ckpt"))?;
    let view = data.val_indices()[1];
    let r = reloaded.render(&reloaded.pose(view)?)?;
    println!("held-out frame {}: psnr {:.2} dB", data.frame_ids[view], psnr(&r.rgb, &data.frames[view].rgb, 1.0)?);
    write_rgb_png(&out.join("render_rgb.png"), &r.rgb)?;
    write_rgb_png(&out.join("observed_rgb.png"), &data.frames[view].rgb)?;
    write_u16_png(&out.join("render_inst.png"), &r.instance)?;
    Ok(())
}
