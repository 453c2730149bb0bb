//! Encodes a few points with a permutohedral hash grid and shows the
//! simplex each one falls in.

use pagnerf::grid::{GridConfig, PermutoGrid};
use pagnerf::lattice::locate_simplex;
use pagnerf::types::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pagnerf::Result<()> {
    let cfg = GridConfig {
        num_levels: 4,
        capacity: 1 << 12,
        features_per_level: 2,
        base_scale: 2.0,
        finest_scale: 16.0,
        init_range: 1e-2,
    };
    let grid = PermutoGrid::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("scales {:?}", grid.scales());
    println!("{} parameters ({} levels x {} slots x {} features)", grid.param_count(), cfg.num_levels, cfg.capacity, cfg.features_per_level);

    for p in [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, -0.2, 0.7), Vec3::new(1.25, 0.5, -0.4)] {
        let q = locate_simplex(&p, grid.scales()[0])?;
        let sum: f64 = q.weights.iter().sum();
        let mut reads = vec![0usize; grid.num_levels()];
        let mut out = vec![0.0; grid.output_dim()];
        grid.encode_probed(&p, &mut out, &mut |level, _| reads[level] += 1);
        println!("p = {:?}", p.as_slice());
        println!("  coarse weights {:.3?} (sum {sum:.6})", q.weights);
        println!("  reads per level {reads:?}");
        println!("  features {:.5?}", out);
    }
    Ok(())
}
