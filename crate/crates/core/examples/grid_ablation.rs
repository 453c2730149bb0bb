//! Sweeps the panoptic grid capacity on a quarter-resolution desk scene and
//! writes the table and plot.

use std::path::Path;

use pagnerf::config::TrainConfig;
use pagnerf::dataset::NoiseConfig;
use pagnerf::scene::{desk, generate};
use pagnerf::trainer::{ablate, write_ablation_csv, write_ablation_svg, AblationAxis};

fn main() -> pagnerf::Result<()> {
    let ds = generate(&desk().with_camera_scale(4), &NoiseConfig::default(), 0)?;
    let mut cfg = TrainConfig::desk();
    for (k, v) in [("epochs", "120"), ("prune_every", "60"), ("voxel_trace_after", "60"), ("panoptic_start_epoch", "60")] {
        cfg.set(k, v)?;
    }
    cfg.optimize_poses = false;
    let axis = AblationAxis::PanopticCapacity;
    let rows = ablate(&ds, &cfg, axis, &[6, 9, 12])?;
    for r in &rows {
        println!(
            "2^{:<2} grid params {:>8}  psnr {:.3} dB  pq {:.3}  {:.1} ms/image",
            r.value,
            r.param_count,
            r.psnr,
            r.pq.unwrap_or(f64::NAN),
            r.infer_seconds * 1e3
        );
    }
    write_ablation_csv(Path::new("panoptic_capacity.csv"), axis, &rows)?;
    write_ablation_svg(Path::new("panoptic_capacity.svg"), axis, &rows)?;
    Ok(())
}
