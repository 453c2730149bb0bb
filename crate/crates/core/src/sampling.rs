//! Depth samples along rays.

use rand::Rng;

use crate::octree::OccupancyOctree;
use crate::types::{Ray, Vec3};

/// Sorted sample depths with the segment length each sample stands for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn positions(&self, ray: &Ray) -> impl Iterator<Item = Vec3> + '_ {
        let (o, d) = (ray.origin, ray.direction);
        self.t.iter().map(move |&t| o + d * t)
    }

    fn push_stratified<R: Rng + ?Sized>(&mut self, t0: f64, t1: f64, n: usize, jitter: bool, rng: &mut R) {
        let w = (t1 - t0) / n as f64;
        for j in 0..n {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            self.t.push(t0 + (j as f64 + u) * w);
            self.delta.push(w);
        }
    }
}

/// Stratified samples: one per equal-width bin of `[t_near, t_far]`, at the
/// bin center or uniformly inside it when `jitter` is set.
pub fn sample_uniform<R: Rng + ?Sized>(ray: &Ray, n: usize, jitter: bool, rng: &mut R) -> RaySamples {
    let mut s = RaySamples {
        t: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
    };
    if n > 0 && ray.t_far.is_finite() {
        s.push_stratified(ray.t_near, ray.t_far, n, jitter, rng);
    }
    s
}

/// `per_voxel` stratified samples in each of the first `k_voxels` occupied
/// leaves pierced by the ray, front to back.
pub fn sample_voxel<R: Rng + ?Sized>(
    ray: &Ray,
    tree: &OccupancyOctree,
    k_voxels: usize,
    per_voxel: usize,
    jitter: bool,
    rng: &mut R,
) -> RaySamples {
    let mut s = RaySamples::default();
    for (t0, t1) in tree.occupied_intervals(ray, k_voxels) {
        s.push_stratified(t0, t1, per_voxel, jitter, rng);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 3.0).unwrap()
    }

    #[test]
    fn single_centered_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_uniform(&ray(), 1, false, &mut rng);
        assert_eq!(s.t, vec![2.0]);
        assert_eq!(s.delta, vec![2.0]);
    }

    #[test]
    fn bin_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_uniform(&ray(), 4, false, &mut rng);
        let want: Vec<f64> = [1.0, 3.0, 5.0, 7.0].iter().map(|k| 1.0 + 2.0 * k / 8.0).collect();
        assert_eq!(s.t, want);
    }

    #[test]
    fn jittered_samples_sorted_and_in_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ray();
        for _ in 0..10_000 {
            let n = 7;
            let s = sample_uniform(&r, n, true, &mut rng);
            let w = (r.t_far - r.t_near) / n as f64;
            for j in 0..n {
                let lo = r.t_near + j as f64 * w;
                assert!(s.t[j] >= lo && s.t[j] <= lo + w);
                assert!(s.delta[j] > 0.0);
                if j > 0 {
                    assert!(s.t[j] >= s.t[j - 1]);
                }
            }
        }
    }
}
