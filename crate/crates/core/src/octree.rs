//! Occupancy octree over a cubic root cell.
//!
//! Levels are stored densely (level `d` has `2^d` cells per axis). A cell at a
//! coarser level is occupied iff any descendant leaf is, which lets ray
//! traversal skip empty space one whole ancestor cell at a time.

use crate::types::{Aabb, Ray, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyOctree {
    root_min: Vec3,
    root_size: f64,
    depth: usize,
    scene: Aabb,
    levels: Vec<Vec<bool>>,
    /// Largest density seen at the probe points of each leaf at the last prune.
    max_density: Vec<f32>,
}

/// Probe offsets inside a leaf (sub-cell centers of a 2×2×2 split).
const PROBES: [[f64; 3]; 8] = [
    [0.25, 0.25, 0.25],
    [0.75, 0.25, 0.25],
    [0.25, 0.75, 0.25],
    [0.75, 0.75, 0.25],
    [0.25, 0.25, 0.75],
    [0.75, 0.25, 0.75],
    [0.25, 0.75, 0.75],
    [0.75, 0.75, 0.75],
];

impl OccupancyOctree {
    /// Fully occupied tree (every leaf touching `scene`).
    pub fn new(scene: Aabb, depth: usize) -> Self {
        let ext = scene.extent();
        let size = ext.max() * (1.0 + 1e-6);
        let center = (scene.min + scene.max) * 0.5;
        let root_min = center - Vec3::repeat(size * 0.5);
        let n = 1usize << depth;
        let mut tree = OccupancyOctree {
            root_min,
            root_size: size,
            depth,
            scene,
            levels: (0..=depth).map(|d| vec![false; 1usize << (3 * d)]).collect(),
            max_density: vec![f32::INFINITY; n * n * n],
        };
        let (lo, hi) = tree.scene_leaf_range();
        for iz in lo[2]..hi[2] {
            for iy in lo[1]..hi[1] {
                for ix in lo[0]..hi[0] {
                    let i = tree.leaf_index(ix, iy, iz);
                    tree.levels[depth][i] = true;
                }
            }
        }
        tree.rebuild_upper_levels();
        tree
    }

    /// Tree with no occupied leaves.
    pub fn empty(scene: Aabb, depth: usize) -> Self {
        let mut t = Self::new(scene, depth);
        for l in t.levels.iter_mut() {
            l.fill(false);
        }
        t.max_density.fill(0.0);
        t
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_size(&self) -> f64 {
        self.root_size / (1usize << self.depth) as f64
    }

    pub fn root(&self) -> Aabb {
        Aabb::new(self.root_min, self.root_min + Vec3::repeat(self.root_size))
    }

    pub fn scene(&self) -> &Aabb {
        &self.scene
    }

    fn res(&self, level: usize) -> usize {
        1usize << level
    }

    fn leaf_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let n = self.res(self.depth);
        ix + n * (iy + n * iz)
    }

    fn cell_index(&self, level: usize, c: [usize; 3]) -> usize {
        let n = self.res(level);
        c[0] + n * (c[1] + n * c[2])
    }

    /// Leaf coordinate range (half-open) covering the scene box.
    fn scene_leaf_range(&self) -> ([usize; 3], [usize; 3]) {
        let n = self.res(self.depth);
        let ls = self.leaf_size();
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = (((self.scene.min[a] - self.root_min[a]) / ls).floor().max(0.0) as usize).min(n);
            hi[a] = (((self.scene.max[a] - self.root_min[a]) / ls).ceil().max(0.0) as usize).min(n);
        }
        (lo, hi)
    }

    pub fn leaf_bounds(&self, ix: usize, iy: usize, iz: usize) -> Aabb {
        let ls = self.leaf_size();
        let min = self.root_min + Vec3::new(ix as f64, iy as f64, iz as f64) * ls;
        Aabb::new(min, min + Vec3::repeat(ls))
    }

    pub fn is_leaf_occupied(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.levels[self.depth][self.leaf_index(ix, iy, iz)]
    }

    pub fn leaf_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let n = self.res(self.depth) as f64;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.root_min[a]) / self.root_size * n;
            if !(u >= 0.0 && u < n) {
                return None;
            }
            c[a] = u as usize;
        }
        Some(c)
    }

    pub fn is_occupied_at(&self, p: &Vec3) -> bool {
        self.leaf_of(p).is_some_and(|c| self.is_leaf_occupied(c[0], c[1], c[2]))
    }

    pub fn occupied_leaves(&self) -> usize {
        self.levels[self.depth].iter().filter(|&&o| o).count()
    }

    pub fn max_density(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.max_density[self.leaf_index(ix, iy, iz)]
    }

    fn rebuild_upper_levels(&mut self) {
        for level in (0..self.depth).rev() {
            let n = self.res(level);
            let mut next = vec![false; n * n * n];
            let fine = &self.levels[level + 1];
            let nf = 2 * n;
            for z in 0..nf {
                for y in 0..nf {
                    for x in 0..nf {
                        if fine[x + nf * (y + nf * z)] {
                            next[x / 2 + n * (y / 2 + n * (z / 2))] = true;
                        }
                    }
                }
            }
            self.levels[level] = next;
        }
    }

    /// Re-derives occupancy from a density field: a leaf stays occupied iff
    /// the largest density at its probe points exceeds `threshold`.
    /// `density` is evaluated on batches of world points.
    pub fn prune(&mut self, threshold: f64, mut density: impl FnMut(&[Vec3]) -> Vec<f64>) {
        let (lo, hi) = self.scene_leaf_range();
        let ls = self.leaf_size();
        let leaf_ids: Vec<[usize; 3]> = (lo[2]..hi[2])
            .flat_map(|z| (lo[1]..hi[1]).flat_map(move |y| (lo[0]..hi[0]).map(move |x| [x, y, z])))
            .collect();
        const LEAVES_PER_BATCH: usize = 512;
        let leaf_level = self.depth;
        self.levels[leaf_level].fill(false);
        for batch in leaf_ids.chunks(LEAVES_PER_BATCH) {
            let mut pts = Vec::with_capacity(batch.len() * PROBES.len());
            for c in batch {
                let min = self.root_min + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * ls;
                for o in &PROBES {
                    pts.push(min + Vec3::new(o[0], o[1], o[2]) * ls);
                }
            }
            let sig = density(&pts);
            for (i, c) in batch.iter().enumerate() {
                let m = sig[i * PROBES.len()..(i + 1) * PROBES.len()]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let idx = self.leaf_index(c[0], c[1], c[2]);
                self.max_density[idx] = m as f32;
                self.levels[leaf_level][idx] = m > threshold;
            }
        }
        self.rebuild_upper_levels();
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let head = [
            self.root_min.x,
            self.root_min.y,
            self.root_min.z,
            self.root_size,
            self.scene.min.x,
            self.scene.min.y,
            self.scene.min.z,
            self.scene.max.x,
            self.scene.max.y,
            self.scene.max.z,
        ];
        crate::util::write_f64s(w, &head)?;
        w.write_all(&(self.depth as u64).to_le_bytes())?;
        let bits: Vec<u8> = self.levels[self.depth].iter().map(|&b| b as u8).collect();
        w.write_all(&bits)?;
        let mut dens = Vec::with_capacity(self.max_density.len() * 4);
        for d in &self.max_density {
            dens.extend_from_slice(&d.to_le_bytes());
        }
        w.write_all(&dens)
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> crate::error::Result<Self> {
        let io = |e| crate::error::Error::io("<octree checkpoint>", e);
        let h = crate::util::read_f64s(r, 10).map_err(io)?;
        let depth = crate::util::read_u64(r).map_err(io)? as usize;
        if depth > 10 {
            return Err(crate::error::Error::load("<octree checkpoint>", format!("octree depth {depth} too large")));
        }
        let n = 1usize << (3 * depth);
        let mut bits = vec![0u8; n];
        r.read_exact(&mut bits).map_err(io)?;
        let mut dens = vec![0u8; n * 4];
        r.read_exact(&mut dens).map_err(io)?;
        let mut t = OccupancyOctree {
            root_min: Vec3::new(h[0], h[1], h[2]),
            root_size: h[3],
            depth,
            scene: Aabb::new(Vec3::new(h[4], h[5], h[6]), Vec3::new(h[7], h[8], h[9])),
            levels: (0..=depth).map(|d| vec![false; 1usize << (3 * d)]).collect(),
            max_density: dens.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        t.levels[depth] = bits.iter().map(|&b| b != 0).collect();
        t.rebuild_upper_levels();
        Ok(t)
    }

    /// Up to `max_count` `[t0, t1]` intervals of occupied leaves along the ray,
    /// front to back, clipped to the ray bounds.
    pub fn occupied_intervals(&self, ray: &Ray, max_count: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if max_count == 0 || !self.levels[0][0] {
            return out;
        }
        let root = self.root();
        let Some((a, b)) = root.intersect(&ray.origin, &ray.direction) else {
            return out;
        };
        let t_end = b.min(ray.t_far);
        let mut t = a.max(ray.t_near);
        let eps = self.root_size * 1e-9;
        while t < t_end && out.len() < max_count {
            let p = ray.at(t + eps);
            let n_leaf = self.res(self.depth) as f64;
            let mut leaf = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let u = (p[a] - self.root_min[a]) / self.root_size * n_leaf;
                if !(u >= 0.0 && u < n_leaf) {
                    inside = false;
                    break;
                }
                leaf[a] = u as usize;
            }
            if !inside {
                break;
            }
            // coarsest empty ancestor, if any
            let mut level = self.depth;
            let mut occupied = true;
            for l in 0..=self.depth {
                let shift = self.depth - l;
                let c = [leaf[0] >> shift, leaf[1] >> shift, leaf[2] >> shift];
                if !self.levels[l][self.cell_index(l, c)] {
                    level = l;
                    occupied = false;
                    break;
                }
            }
            let shift = self.depth - level;
            let cell = [leaf[0] >> shift, leaf[1] >> shift, leaf[2] >> shift];
            let cell_size = self.root_size / self.res(level) as f64;
            let mut t_exit = f64::INFINITY;
            for a in 0..3 {
                let d = ray.direction[a];
                if d.abs() < 1e-15 {
                    continue;
                }
                let lo = self.root_min[a] + cell[a] as f64 * cell_size;
                let bound = if d > 0.0 { lo + cell_size } else { lo };
                t_exit = t_exit.min((bound - ray.origin[a]) / d);
            }
            let t_exit = t_exit.min(t_end).max(t + eps);
            if occupied && t_exit > t {
                out.push((t, t_exit));
            }
            t = t_exit;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_voxel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_scene() -> Aabb {
        Aabb::new(Vec3::zeros(), Vec3::repeat(1.0))
    }

    #[test]
    fn empty_tree_gives_no_samples() {
        let t = OccupancyOctree::empty(unit_scene(), 4);
        let r = Ray::new(Vec3::new(0.5, 0.5, -1.0), Vec3::z(), 0.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_voxel(&r, &t, 8, 2, true, &mut rng).is_empty());
    }

    #[test]
    fn single_leaf_two_samples() {
        let mut t = OccupancyOctree::new(unit_scene(), 3);
        // occupied only where density says so: leaf (4,4,5)
        let target = t.leaf_bounds(4, 4, 5);
        t.prune(0.5, |pts| pts.iter().map(|p| if target.contains(p) { 1.0 } else { 0.0 }).collect());
        assert_eq!(t.occupied_leaves(), 1);
        let c = (target.min + target.max) * 0.5;
        let r = Ray::new(Vec3::new(c.x, c.y, -1.0), Vec3::z(), 0.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_voxel(&r, &t, 8, 2, true, &mut rng);
        assert_eq!(s.len(), 2);
        for &ts in &s.t {
            assert!(ts > 1.0 + target.min.z && ts < 1.0 + target.max.z);
        }
    }

    #[test]
    fn voxel_samples_inside_occupied_leaves() {
        let mut t = OccupancyOctree::new(unit_scene(), 5);
        let center = Vec3::repeat(0.5);
        t.prune(0.5, |pts| pts.iter().map(|p| if (p - center).norm() < 0.3 { 1.0 } else { 0.0 }).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0;
        for _ in 0..500 {
            let o = Vec3::new(rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), -1.5);
            let target = Vec3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
            let r = Ray::new(o, target - o, 0.0, 10.0).unwrap();
            let s = sample_voxel(&r, &t, 8, 2, false, &mut rng);
            total += s.len();
            for p in s.positions(&r) {
                assert!(t.is_occupied_at(&p), "sample {p:?} not in an occupied leaf");
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn prune_thresholds() {
        let mut t = OccupancyOctree::new(unit_scene(), 3);
        t.prune(0.1, |pts| vec![0.0; pts.len()]);
        assert_eq!(t.occupied_leaves(), 0);
        let field = |pts: &[Vec3]| pts.iter().map(|p| p.x * 10.0).collect::<Vec<_>>();
        let mut prev = usize::MAX;
        for th in [0.0, 1.0, 3.0, 7.0, 9.5, f64::INFINITY] {
            t.prune(th, field);
            let n = t.occupied_leaves();
            assert!(n <= prev);
            prev = n;
        }
        assert_eq!(prev, 0);
    }

    #[test]
    fn traversal_visits_leaves_in_order() {
        let t = OccupancyOctree::new(unit_scene(), 2);
        let r = Ray::new(Vec3::new(0.1, 0.1, -1.0), Vec3::z(), 0.0, 10.0).unwrap();
        let iv = t.occupied_intervals(&r, 100);
        assert_eq!(iv.len(), 4);
        for w in iv.windows(2) {
            assert!(w[0].1 <= w[1].0 + 1e-9);
        }
        assert_eq!(t.occupied_intervals(&r, 3).len(), 3);
    }
}
