//! Optimal detection-to-slot assignment and the sliding ID window.

use crate::error::{Error, Result};

/// Cost given to slots a detection may not take.
pub const FORBIDDEN_COST: f64 = 1e9;

/// Row-major `rows × cols` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!("cost matrix {rows}x{cols} given {} entries", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        CostMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

/// Minimum-cost injective assignment of rows to columns (`rows ≤ cols`).
/// Returns the column chosen for each row. Among equal-cost choices the
/// lowest column index wins.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Input(format!("cannot assign {n} rows injectively to {m} columns")));
    }
    if cost.data.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // shortest augmenting paths with potentials; index 0 is a virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Slots a detection may take, as a function of its position along the
/// trajectory. Slot 0 is reserved for stuff and never assignable.
#[derive(Clone, Debug, PartialEq)]
pub struct IdWindow {
    /// Slots per meter of trajectory.
    pub rate: f64,
    /// Slots per window.
    pub width: usize,
    /// Trajectory coordinate of the first window.
    pub origin: f64,
    pub frustum_length: f64,
    pub num_slots: usize,
}

impl IdWindow {
    /// `rate = (N−1)/trajectory_length`, `width = max(2, ⌊rate·frustum⌋)`,
    /// capped at the `N−1` assignable slots.
    pub fn new(num_slots: usize, trajectory_length: f64, frustum_length: f64, origin: f64) -> Result<Self> {
        if num_slots < 2 || trajectory_length <= 0.0 || frustum_length <= 0.0 {
            return Err(Error::Config(format!(
                "invalid id window: {num_slots} slots, trajectory {trajectory_length} m, frustum {frustum_length} m"
            )));
        }
        let rate = (num_slots - 1) as f64 / trajectory_length;
        let width = ((rate * frustum_length).floor() as usize).max(2).min(num_slots - 1);
        Ok(IdWindow {
            rate,
            width,
            origin,
            frustum_length,
            num_slots,
        })
    }

    /// Half-open slot range for a detection at trajectory coordinate `u`.
    pub fn allowed(&self, u: f64) -> std::ops::Range<usize> {
        let last_start = self.num_slots - self.width;
        let offset = ((u - self.origin) * self.rate).floor();
        let start = if offset.is_finite() && offset > 0.0 {
            (1 + offset as usize).min(last_start)
        } else {
            1
        };
        start..start + self.width
    }
}

/// Sets every slot outside each detection's window to [`FORBIDDEN_COST`].
/// `positions` holds each row's trajectory coordinate.
pub fn apply_id_window(cost: &mut CostMatrix, positions: &[f64], window: &IdWindow) -> Result<()> {
    if positions.len() != cost.rows {
        return Err(Error::Input(format!("{} positions for {} detections", positions.len(), cost.rows)));
    }
    for (r, &u) in positions.iter().enumerate() {
        let ok = window.allowed(u);
        for c in 0..cost.cols {
            if !ok.contains(&c) {
                cost.set(r, c, FORBIDDEN_COST);
            }
        }
    }
    Ok(())
}

/// Forbids slot 0 for every row.
pub fn forbid_stuff_slot(cost: &mut CostMatrix) {
    for r in 0..cost.rows {
        cost.set(r, 0, FORBIDDEN_COST);
    }
}

/// Negative mean rendered probability of each slot over each detection's
/// rays. `inst` is row-major `rays × slots`. Detections without rays are
/// skipped; the second value lists the detections that got a row.
pub fn assignment_cost(rays_by_mask: &[Vec<usize>], inst: &[f64], num_slots: usize) -> (CostMatrix, Vec<usize>) {
    let kept: Vec<usize> = (0..rays_by_mask.len()).filter(|&i| !rays_by_mask[i].is_empty()).collect();
    let mut cost = CostMatrix::filled(kept.len(), num_slots, 0.0);
    for (row, &mask) in kept.iter().enumerate() {
        let rays = &rays_by_mask[mask];
        let inv = 1.0 / rays.len() as f64;
        for &r in rays {
            for m in 0..num_slots {
                cost.data[row * num_slots + m] -= inst[r * num_slots + m] * inv;
            }
        }
    }
    (cost, kept)
}
