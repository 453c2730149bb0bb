//! Multi-resolution permutohedral hash grid with a trainable feature table.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{hash_vertex, locate_unchecked, DIM, VERTS};
use crate::types::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub num_levels: usize,
    /// Entries per level; power of two.
    pub capacity: usize,
    pub features_per_level: usize,
    /// Lattice scale of the coarsest level (≈ vertices per meter).
    pub base_scale: f64,
    /// Lattice scale of the finest level.
    pub finest_scale: f64,
    pub init_range: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            num_levels: 21,
            capacity: 1 << 18,
            features_per_level: 2,
            base_scale: 2.0,
            finest_scale: 400.0,
            init_range: 1e-4,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("grid needs at least one level".into()));
        }
        if !self.capacity.is_power_of_two() {
            return Err(Error::Config(format!("grid capacity {} is not a power of two", self.capacity)));
        }
        if self.features_per_level == 0 {
            return Err(Error::Config("features_per_level must be ≥ 1".into()));
        }
        if !(self.base_scale > 0.0) || (self.num_levels > 1 && !(self.finest_scale > self.base_scale)) {
            return Err(Error::Config("grid scales must be positive and increasing".into()));
        }
        Ok(())
    }

    /// Geometric progression `s_ℓ = s_0 · b^ℓ` ending at `finest_scale`.
    pub fn scales(&self) -> Vec<f64> {
        if self.num_levels == 1 {
            return vec![self.base_scale];
        }
        let b = (self.finest_scale / self.base_scale).powf(1.0 / (self.num_levels - 1) as f64);
        (0..self.num_levels).map(|l| self.base_scale * b.powi(l as i32)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.num_levels * self.capacity * self.features_per_level
    }
}

/// Receives gradient contributions for flat table indices.
pub trait GradSink {
    fn add(&mut self, index: usize, value: f64);
}

impl GradSink for [f64] {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

impl GradSink for Vec<f64> {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

/// Append-only gradient list, reduced into a dense buffer later in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct SparseGrad {
    pub entries: Vec<(u32, f64)>,
}

impl GradSink for SparseGrad {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self.entries.push((index as u32, value));
    }
}

impl SparseGrad {
    pub fn reduce_into(&self, dense: &mut [f64]) {
        for &(i, v) in &self.entries {
            dense[i as usize] += v;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Clone, Debug)]
pub struct PermutoGrid {
    config: GridConfig,
    scales: Vec<f64>,
    /// `L × T × F`, level-major.
    pub table: Vec<f64>,
    /// Same layout as `table`.
    pub grad: Vec<f64>,
}

impl PermutoGrid {
    pub fn new<R: Rng + ?Sized>(config: GridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        let r = config.init_range;
        let table = (0..n)
            .map(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 })
            .collect();
        Ok(Self::with_table(config, table))
    }

    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Ok(Self::with_table(config, vec![0.0; n]))
    }

    fn with_table(config: GridConfig, table: Vec<f64>) -> Self {
        let scales = config.scales();
        let n = table.len();
        PermutoGrid {
            config,
            scales,
            table,
            grad: vec![0.0; n],
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn num_levels(&self) -> usize {
        self.config.num_levels
    }

    pub fn features(&self) -> usize {
        self.config.features_per_level
    }

    pub fn output_dim(&self) -> usize {
        self.config.num_levels * self.config.features_per_level
    }

    pub fn param_count(&self) -> usize {
        self.table.len()
    }

    #[inline]
    fn slot_offset(&self, level: usize, slot: usize) -> usize {
        (level * self.config.capacity + slot) * self.config.features_per_level
    }

    /// Interpolated features, levels concatenated coarse-to-fine.
    pub fn encode(&self, p: &Vec3, out: &mut [f64]) {
        self.encode_probed(p, out, &mut |_, _| {});
    }

    pub fn encode_vec(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode(p, &mut out);
        out
    }

    /// [`encode`](Self::encode) that reports every table read as `(level, slot)`.
    pub fn encode_probed(&self, p: &Vec3, out: &mut [f64], probe: &mut impl FnMut(usize, usize)) {
        let f = self.config.features_per_level;
        debug_assert_eq!(out.len(), self.output_dim());
        out.fill(0.0);
        for (level, &scale) in self.scales.iter().enumerate() {
            let q = locate_unchecked(p, scale);
            let dst = &mut out[level * f..(level + 1) * f];
            for v in 0..VERTS {
                let slot = hash_vertex(&q.keys[v], self.config.capacity);
                probe(level, slot);
                let off = self.slot_offset(level, slot);
                let w = q.weights[v];
                for (d, t) in dst.iter_mut().zip(&self.table[off..off + f]) {
                    *d += w * t;
                }
            }
        }
    }

    /// Accumulates `weight · upstream` into the touched table slots and
    /// returns d⟨upstream, encode(p)⟩ / d p when `want_position` is set.
    pub fn backward_into<S: GradSink + ?Sized>(
        &self,
        p: &Vec3,
        upstream: &[f64],
        sink: &mut S,
        want_position: bool,
    ) -> Vec3 {
        let f = self.config.features_per_level;
        let mut dp = Vec3::zeros();
        for (level, &scale) in self.scales.iter().enumerate() {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            let q = locate_unchecked(p, scale);
            let jac = if want_position { Some(q.weight_jacobian(scale)) } else { None };
            for v in 0..VERTS {
                let slot = hash_vertex(&q.keys[v], self.config.capacity);
                let off = self.slot_offset(level, slot);
                let w = q.weights[v];
                let mut dot = 0.0;
                for k in 0..f {
                    sink.add(off + k, w * up[k]);
                    dot += up[k] * self.table[off + k];
                }
                if let Some(j) = &jac {
                    for c in 0..DIM {
                        dp[c] += dot * j[v][c];
                    }
                }
            }
        }
        dp
    }

    /// Backward pass accumulating into this grid's own gradient table.
    pub fn encode_backward(&mut self, p: &Vec3, upstream: &[f64]) -> Vec3 {
        let mut grad = std::mem::take(&mut self.grad);
        let dp = self.backward_into(p, upstream, grad.as_mut_slice(), true);
        self.grad = grad;
        dp
    }

    /// d encode / d p as `L·F` rows of 3 columns.
    pub fn position_jacobian(&self, p: &Vec3) -> Vec<[f64; 3]> {
        let f = self.config.features_per_level;
        let mut rows = vec![[0.0; 3]; self.output_dim()];
        for (level, &scale) in self.scales.iter().enumerate() {
            let q = locate_unchecked(p, scale);
            let jac = q.weight_jacobian(scale);
            for v in 0..VERTS {
                let off = self.slot_offset(level, hash_vertex(&q.keys[v], self.config.capacity));
                for k in 0..f {
                    for c in 0..DIM {
                        rows[level * f + k][c] += self.table[off + k] * jac[v][c];
                    }
                }
            }
        }
        rows
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn checksum(&self) -> u64 {
        crate::util::checksum_f64(&self.table)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<grid checkpoint>", e);
        w.write_all(GRID_MAGIC).map_err(io)?;
        for v in [
            self.config.num_levels as u32,
            self.config.capacity as u32,
            self.config.features_per_level as u32,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [self.config.base_scale, self.config.finest_scale, self.config.init_range] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for s in &self.scales {
            w.write_all(&s.to_le_bytes()).map_err(io)?;
        }
        crate::util::write_f64s(w, &self.table).map_err(io)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::load("<grid checkpoint>", m);
        let io = |e| Error::io("<grid checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != GRID_MAGIC {
            return Err(bad("bad grid magic"));
        }
        let mut u = [0u8; 4];
        let mut ints = [0usize; 3];
        for v in ints.iter_mut() {
            r.read_exact(&mut u).map_err(io)?;
            *v = u32::from_le_bytes(u) as usize;
        }
        let mut fl = [0.0f64; 3];
        for v in fl.iter_mut() {
            *v = crate::util::read_f64(r).map_err(io)?;
        }
        let config = GridConfig {
            num_levels: ints[0],
            capacity: ints[1],
            features_per_level: ints[2],
            base_scale: fl[0],
            finest_scale: fl[1],
            init_range: fl[2],
        };
        config.validate()?;
        let mut scales = vec![0.0; config.num_levels];
        for s in scales.iter_mut() {
            *s = crate::util::read_f64(r).map_err(io)?;
        }
        if scales != config.scales() {
            return Err(bad("stored scales disagree with config"));
        }
        let table = crate::util::read_f64s(r, config.param_count()).map_err(io)?;
        Ok(Self::with_table(config, table))
    }
}

const GRID_MAGIC: &[u8; 4] = b"PGRD";

/// Panoptic features `g_p = g_c + Δg_p`. A shorter `delta` (fewer levels in
/// the panoptic grid) is zero-padded on the finest levels.
pub fn delta_combine(g_c: &[f64], delta: &[f64], out: &mut [f64]) -> Result<()> {
    if delta.len() > g_c.len() || out.len() != g_c.len() {
        return Err(Error::Input(format!(
            "cannot combine {} color features with {} delta features",
            g_c.len(),
            delta.len()
        )));
    }
    out.copy_from_slice(g_c);
    for (o, d) in out.iter_mut().zip(delta) {
        *o += d;
    }
    Ok(())
}

/// Gradient of `delta_combine` routed to the delta side only; the color-side
/// gradient is dropped.
pub fn delta_combine_backward(upstream: &[f64], delta_len: usize) -> &[f64] {
    &upstream[..delta_len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{locate_simplex, project};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GridConfig {
        GridConfig {
            num_levels: 4,
            capacity: 1 << 8,
            features_per_level: 2,
            base_scale: 1.0,
            finest_scale: 8.0,
            init_range: 1e-4,
        }
    }

    fn random_grid(seed: u64) -> PermutoGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PermutoGrid::new(small_config(), &mut rng).unwrap();
        for v in g.table.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn zero_table_encodes_zero() {
        let g = PermutoGrid::zeros(small_config()).unwrap();
        assert!(g.encode_vec(&Vec3::new(0.3, 0.1, -0.2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_table_is_reproduced() {
        let mut g = PermutoGrid::zeros(small_config()).unwrap();
        g.table.fill(0.7);
        for v in g.encode_vec(&Vec3::new(1.3, -0.4, 2.2)) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entry_at_its_vertex() {
        let mut g = PermutoGrid::zeros(small_config()).unwrap();
        let level = 2;
        let scale = g.scales()[level];
        let q = locate_simplex(&Vec3::new(0.4, 0.2, 0.9), scale).unwrap();
        let key = q.keys[1];
        let p = project(&[key[0] as f64, key[1] as f64, key[2] as f64, key[3] as f64], scale);
        let slot = hash_vertex(&key, g.config().capacity);
        let off = g.slot_offset(level, slot);
        g.table[off] = 3.0;
        g.table[off + 1] = -2.0;
        let out = g.encode_vec(&p);
        assert!((out[level * 2] - 3.0).abs() < 1e-9);
        assert!((out[level * 2 + 1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn four_reads_per_level() {
        let g = random_grid(1);
        let mut reads = vec![0usize; g.num_levels()];
        let mut out = vec![0.0; g.output_dim()];
        g.encode_probed(&Vec3::new(0.2, 0.5, -0.1), &mut out, &mut |l, _| reads[l] += 1);
        assert!(reads.iter().all(|&r| r == 4));
    }

    #[test]
    fn zero_upstream_leaves_grad_untouched() {
        let mut g = random_grid(2);
        g.encode_backward(&Vec3::new(0.1, 0.2, 0.3), &vec![0.0; g.output_dim()]);
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertex_query_touches_one_slot() {
        let mut g = random_grid(3);
        let level = 1;
        let scale = g.scales()[level];
        let q = locate_simplex(&Vec3::new(0.3, 0.3, 0.3), scale).unwrap();
        let key = q.keys[0];
        let p = project(&[key[0] as f64, key[1] as f64, key[2] as f64, key[3] as f64], scale);
        let mut up = vec![0.0; g.output_dim()];
        up[level * 2] = 1.0;
        g.encode_backward(&p, &up);
        let touched: Vec<f64> = g.grad.iter().copied().filter(|v| v.abs() > 1e-9).collect();
        assert_eq!(touched.len(), 1);
        assert!((touched[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..3 {
            let mut g = random_grid(seed);
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let up: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            g.encode_backward(&p, &up);
            let loss = |g: &PermutoGrid| -> f64 { g.encode_vec(&p).iter().zip(&up).map(|(a, b)| a * b).sum() };
            let h = 1e-6;
            for i in 0..g.table.len() {
                let orig = g.table[i];
                g.table[i] = orig + h;
                let lp = loss(&g);
                g.table[i] = orig - h;
                let lm = loss(&g);
                g.table[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.grad[i];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-10, "{i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for seed in 0..3 {
            let g = random_grid(seed + 10);
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let up: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut sink = vec![0.0; g.table.len()];
            let dp = g.backward_into(&p, &up, sink.as_mut_slice(), true);
            let jac = g.position_jacobian(&p);
            let h = 1e-7;
            for c in 0..3 {
                let mut pp = p;
                pp[c] += h;
                let mut pm = p;
                pm[c] -= h;
                let fp = g.encode_vec(&pp);
                let fm = g.encode_vec(&pm);
                let fd: f64 = fp.iter().zip(&fm).zip(&up).map(|((a, b), u)| (a - b) / (2.0 * h) * u).sum();
                assert!((fd - dp[c]).abs() / fd.abs().max(1e-6) < 1e-4, "{fd} vs {}", dp[c]);
                let jc: f64 = jac.iter().zip(&up).map(|(row, u)| row[c] * u).sum();
                assert!((jc - dp[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_is_lipschitz_locally() {
        let g = random_grid(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let finest = *g.scales().last().unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let eps = 0.1 / finest;
            let a = g.encode_vec(&p);
            let b = g.encode_vec(&(p + dir * eps));
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(d / eps);
        }
        // |table| ≤ 1, weight gradients bounded by a few lattice units
        assert!(worst < 20.0 * finest * (g.output_dim() as f64).sqrt(), "{worst}");
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = GridConfig { num_levels: 21, capacity: 1 << 18, features_per_level: 2, ..GridConfig::default() };
        assert_eq!(cfg.param_count(), 11_010_048);
        let tiny = GridConfig { num_levels: 1, capacity: 1, features_per_level: 1, base_scale: 1.0, finest_scale: 1.0, init_range: 0.0 };
        assert_eq!(tiny.param_count(), 1);
        let half = GridConfig { num_levels: 2, ..small_config() };
        assert_eq!(half.param_count() * 2, small_config().param_count());
    }

    #[test]
    fn delta_combine_rules() {
        let gc = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        delta_combine(&gc, &[0.0; 4], &mut out).unwrap();
        assert_eq!(out, gc);
        delta_combine(&[0.0; 4], &[5.0, 6.0, 7.0, 8.0], &mut out).unwrap();
        assert_eq!(out, [5.0, 6.0, 7.0, 8.0]);
        delta_combine(&gc, &[1.0, 1.0], &mut out).unwrap();
        assert_eq!(out, [2.0, 3.0, 3.0, 4.0]);
        assert!(delta_combine(&gc[..2], &[1.0; 4], &mut [0.0; 2]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let g = random_grid(7);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = PermutoGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.table, g.table);
        assert_eq!(back.config(), g.config());
    }
}
