//! Permutohedral lattice in three dimensions.
//!
//! A point is lifted onto the sum-zero hyperplane of R⁴, the enclosing simplex
//! is found by rounding to the nearest remainder-0 lattice point and ranking the
//! residuals, and the point is expressed by barycentric weights over the four
//! simplex vertices.

use crate::error::{Error, Result};
use crate::types::Vec3;

pub const DIM: usize = 3;
pub const VERTS: usize = DIM + 1;

/// Integer lattice coordinates on the sum-zero hyperplane.
pub type LatticeKey = [i32; VERTS];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexQuery {
    pub keys: [LatticeKey; VERTS],
    pub weights: [f64; VERTS],
    /// Rank of each elevated coordinate's residual; fixes the simplex and
    /// therefore the (locally linear) weight Jacobian.
    rank: [usize; VERTS],
}

// (d+1)·sqrt(2/3) / sqrt((i+1)(i+2)) for i = 0..d
fn axis_scale(i: usize) -> f64 {
    let d1 = VERTS as f64;
    d1 * (2.0f64 / 3.0).sqrt() / (((i + 1) * (i + 2)) as f64).sqrt()
}

/// Linear lift of a scaled position onto the sum-zero hyperplane.
pub fn elevate(p: &Vec3, scale: f64) -> [f64; VERTS] {
    let mut e = [0.0; VERTS];
    let mut sum = 0.0;
    for i in (1..=DIM).rev() {
        let cf = p[i - 1] * scale * axis_scale(i - 1);
        e[i] = sum - i as f64 * cf;
        sum += cf;
    }
    e[0] = sum;
    e
}

/// Inverse of [`elevate`] for points on the hyperplane.
pub fn project(e: &[f64; VERTS], scale: f64) -> Vec3 {
    let cf2 = -e[3] / 3.0;
    let cf1 = (cf2 - e[2]) / 2.0;
    let cf0 = cf2 + cf1 - e[1];
    Vec3::new(
        cf0 / (scale * axis_scale(0)),
        cf1 / (scale * axis_scale(1)),
        cf2 / (scale * axis_scale(2)),
    )
}

/// Jacobian of [`elevate`] w.r.t. the position (rows: elevated coords).
fn elevate_jacobian(scale: f64) -> [[f64; DIM]; VERTS] {
    let mut m = [[0.0; DIM]; VERTS];
    for i in 0..DIM {
        let mut p = Vec3::zeros();
        p[i] = 1.0;
        let col = elevate(&p, scale);
        for r in 0..VERTS {
            m[r][i] = col[r];
        }
    }
    m
}

/// Finds the enclosing simplex of `p` on the lattice at `scale`.
pub fn locate_simplex(p: &Vec3, scale: f64) -> Result<SimplexQuery> {
    if !p.iter().all(|v| v.is_finite()) || !scale.is_finite() {
        return Err(Error::Input(format!("non-finite lattice query {p:?} @ {scale}")));
    }
    Ok(locate_unchecked(p, scale))
}

pub(crate) fn locate_unchecked(p: &Vec3, scale: f64) -> SimplexQuery {
    let d1 = VERTS as i32;
    let e = elevate(p, scale);

    let mut rem0 = [0i32; VERTS];
    let mut sum = 0i32;
    for i in 0..VERTS {
        let v = e[i] / d1 as f64;
        let up = v.ceil() * d1 as f64;
        let down = v.floor() * d1 as f64;
        rem0[i] = if up - e[i] < e[i] - down { up as i32 } else { down as i32 };
        sum += rem0[i];
    }
    sum /= d1;

    let mut rank = [0i32; VERTS];
    for i in 0..DIM {
        for j in i + 1..VERTS {
            if e[i] - (rem0[i] as f64) < e[j] - (rem0[j] as f64) {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }

    if sum > 0 {
        for i in 0..VERTS {
            if rank[i] >= d1 - sum {
                rem0[i] -= d1;
                rank[i] += sum - d1;
            } else {
                rank[i] += sum;
            }
        }
    } else if sum < 0 {
        for i in 0..VERTS {
            if rank[i] < -sum {
                rem0[i] += d1;
                rank[i] += d1 + sum;
            } else {
                rank[i] += sum;
            }
        }
    }

    let mut bary = [0.0f64; VERTS + 1];
    for i in 0..VERTS {
        let delta = (e[i] - rem0[i] as f64) / d1 as f64;
        let r = rank[i] as usize;
        bary[DIM - r] += delta;
        bary[DIM + 1 - r] -= delta;
    }
    bary[0] += 1.0 + bary[VERTS];

    let mut keys = [[0i32; VERTS]; VERTS];
    for (rem, key) in keys.iter_mut().enumerate() {
        for i in 0..VERTS {
            key[i] = rem0[i] + rem as i32;
            if rank[i] > DIM as i32 - rem as i32 {
                key[i] -= d1;
            }
        }
    }

    let mut weights = [0.0; VERTS];
    weights.copy_from_slice(&bary[..VERTS]);
    let mut rank_u = [0usize; VERTS];
    for i in 0..VERTS {
        rank_u[i] = rank[i] as usize;
    }
    SimplexQuery {
        keys,
        weights,
        rank: rank_u,
    }
}

impl SimplexQuery {
    /// d weight / d position, valid inside the simplex interior.
    pub fn weight_jacobian(&self, scale: f64) -> [[f64; DIM]; VERTS] {
        // d bary / d elevated
        let inv = 1.0 / VERTS as f64;
        let mut db = [[0.0f64; VERTS]; VERTS + 1];
        for i in 0..VERTS {
            let r = self.rank[i];
            db[DIM - r][i] += inv;
            db[DIM + 1 - r][i] -= inv;
        }
        for i in 0..VERTS {
            db[0][i] += db[VERTS][i];
        }
        let de = elevate_jacobian(scale);
        let mut out = [[0.0; DIM]; VERTS];
        for k in 0..VERTS {
            for c in 0..DIM {
                out[k][c] = (0..VERTS).map(|i| db[k][i] * de[i][c]).sum();
            }
        }
        out
    }
}

const HASH_PRIMES: [u64; DIM] = [0x9E37_79B9_7F4A_7C15, 0xC2B2_AE3D_27D4_EB4F, 0x1656_67B1_9E37_79F9];

/// Maps a lattice key to a table slot in `[0, capacity)`; `capacity` must be a power of two.
#[inline]
pub fn hash_vertex(key: &LatticeKey, capacity: usize) -> usize {
    debug_assert!(capacity.is_power_of_two());
    let mut h = 0u64;
    for i in 0..DIM {
        h ^= (key[i] as i64 as u64).wrapping_mul(HASH_PRIMES[i]);
    }
    h ^= h >> 32;
    h ^= h >> 16;
    (h as usize) & (capacity - 1)
}
