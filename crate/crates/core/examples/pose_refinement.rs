//! Joint pose optimization from noisy odometry (1 cm, 0.5 deg) on a
//! half-resolution desk scene.

use pagnerf::config::TrainConfig;
use pagnerf::dataset::NoiseConfig;
use pagnerf::scene::{desk, generate};
use pagnerf::trainer::run_window;

fn main() -> pagnerf::Result<()> {
    let noise = NoiseConfig {
        sigma_t: 0.01,
        sigma_r_deg: 0.5,
        ..NoiseConfig::default()
    };
    let ds = generate(&desk().with_camera_scale(2), &noise, 3)?;
    let mut cfg = TrainConfig::desk();
    for (k, v) in [("epochs", "300"), ("prune_every", "150"), ("voxel_trace_after", "150"), ("panoptic_start_epoch", "299")] {
        cfg.set(k, v)?;
    }
    for optimize in [false, true] {
        cfg.optimize_poses = optimize;
        let (_, rep) = run_window(&ds, 0, &cfg)?;
        let pe = rep.pose_error.expect("generated datasets carry ground-truth poses");
        println!(
            "optimize poses {optimize}: psnr {:.2} dB, pose error {:.2} cm / {:.3} deg (odometry {:.2} cm / {:.3} deg)",
            rep.psnr,
            pe.translation * 100.0,
            pe.rotation_deg,
            pe.init_translation * 100.0,
            pe.init_rotation_deg
        );
    }
    Ok(())
}
