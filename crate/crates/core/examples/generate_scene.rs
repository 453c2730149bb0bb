//! Renders the desk scene with noisy odometry and flickering detections,
//! writes it to disk and reloads it.
//!
//! cargo run --release --example generate_scene -- /tmp/desk

use std::path::PathBuf;

use pagnerf::dataset::{export_dataset, load_dataset, NoiseConfig};
use pagnerf::scene::{desk, generate};

fn main() -> pagnerf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk_dataset".into()));
    let noise = NoiseConfig {
        sigma_t: 0.01,
        sigma_r_deg: 0.5,
        dropout: 0.2,
        shuffle_ids: true,
        conf_noise: 0.1,
    };
    let ds = generate(&desk(), &noise, 0)?;
    export_dataset(&ds, &out)?;
    let back = load_dataset(&out)?;
    let m = back.manifest.as_ref().expect("generated datasets carry a manifest");
    println!("{} frames of {}x{} in {}", back.frames.len(), back.camera.width, back.camera.height, out.display());
    println!("train split {:?}", m.train);
    println!("trajectory {:.2} m, frustum {:.2} m", m.trajectory_length(), m.frustum_length);
    for f in back.frames.iter().take(4) {
        let mut ids: Vec<u16> = f.inst_det.data.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        println!("frame {}: detection ids {:?}", f.index, ids);
    }
    Ok(())
}
