//! Training losses and their gradients with respect to rendered quantities.
//!
//! Every loss returns `(value, gradient)` where the gradient has the shape of
//! the rendered input it was given. Distributions are the composited,
//! unnormalized ones: the ray opacity acts as a confidence.

use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub color: f64,
    pub semantic: f64,
    pub id: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            semantic: 0.1,
            id: 10.0,
            consistency: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub color: f64,
    pub semantic: f64,
    pub things: f64,
    pub stuff: f64,
    pub consistency: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("color", self.color),
            ("semantic", self.semantic),
            ("things", self.things),
            ("stuff", self.stuff),
            ("consistency", self.consistency),
        ]
    }
}

/// `λ_c·color + λ_s·semantic + λ_id·(things + stuff) + λ_reg·consistency`.
pub fn total_loss(parts: &LossParts, w: &LossWeights, epoch: usize) -> Result<f64> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name, epoch });
        }
    }
    Ok(w.color * parts.color + w.semantic * parts.semantic + w.id * (parts.things + parts.stuff) + w.consistency * parts.consistency)
}

/// `−w·log(max(p, floor))` and its derivative in `p`.
fn weighted_nll(p: f64, w: f64) -> (f64, f64) {
    if p > PROB_FLOOR {
        (-w * p.ln(), -w / p)
    } else {
        (-w * PROB_FLOOR.ln(), 0.0)
    }
}

/// Mean squared error over all channels of all rays.
pub fn color_loss(rendered: &[[f64; 3]], observed: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    debug_assert_eq!(rendered.len(), observed.len());
    if rendered.is_empty() {
        return (0.0, Vec::new());
    }
    let n = (3 * rendered.len()) as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| {
            let mut g = [0.0; 3];
            for c in 0..3 {
                let e = r[c] - o[c];
                loss += e * e;
                g[c] = 2.0 * e / n;
            }
            g
        })
        .collect();
    (loss / n, grad)
}

/// Confidence-weighted cross-entropy of rendered class distributions
/// (row-major `rays × classes`) against per-ray labels, averaged over rays.
pub fn semantic_loss(dist: &[f64], num_classes: usize, labels: &[u16], conf: &[f64]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; dist.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for r in 0..n {
        let k = r * num_classes + labels[r] as usize;
        let (l, g) = weighted_nll(dist[k], conf[r]);
        loss += l;
        grad[k] = g / n as f64;
    }
    (loss / n as f64, grad)
}

/// Thing rays of one frame with their assigned slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTargets {
    pub rays: Vec<usize>,
    pub slots: Vec<usize>,
}

/// Mean over frames of the mean over each frame's thing rays of
/// `−w_r·log p̂_r(slot_r)`. Frames without thing rays do not count.
pub fn things_loss(inst: &[f64], num_slots: usize, frames: &[FrameTargets], conf: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; inst.len()];
    let active: Vec<&FrameTargets> = frames.iter().filter(|f| !f.rays.is_empty()).collect();
    if active.is_empty() {
        return (0.0, grad);
    }
    let nf = active.len() as f64;
    let mut loss = 0.0;
    for f in active {
        let nr = f.rays.len() as f64;
        for (&r, &s) in f.rays.iter().zip(&f.slots) {
            let k = r * num_slots + s;
            let (l, g) = weighted_nll(inst[k], conf[r]);
            loss += l / (nr * nf);
            grad[k] += g / (nr * nf);
        }
    }
    (loss, grad)
}

/// Mean of `−w_r·log p̂_r(0)` over stuff rays.
pub fn stuff_loss(inst: &[f64], num_slots: usize, rays: &[usize], conf: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; inst.len()];
    if rays.is_empty() {
        return (0.0, grad);
    }
    let n = rays.len() as f64;
    let mut loss = 0.0;
    for &r in rays {
        let k = r * num_slots;
        let (l, g) = weighted_nll(inst[k], conf[r]);
        loss += l / n;
        grad[k] += g / n;
    }
    (loss, grad)
}

/// Segment consistency: each detected mask should agree on one slot, the
/// argmax of its mean rendered distribution (held fixed). Averaged over the
/// mask's rays, then masks, then frames that have masks.
pub fn segment_consistency_loss(inst: &[f64], num_slots: usize, frames: &[Vec<Vec<usize>>], conf: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; inst.len()];
    let active: Vec<&Vec<Vec<usize>>> = frames.iter().filter(|f| f.iter().any(|m| !m.is_empty())).collect();
    if active.is_empty() {
        return (0.0, grad);
    }
    let nf = active.len() as f64;
    let mut loss = 0.0;
    for masks in active {
        let masks: Vec<&Vec<usize>> = masks.iter().filter(|m| !m.is_empty()).collect();
        let nm = masks.len() as f64;
        for rays in masks {
            let mut mean = vec![0.0; num_slots];
            for &r in rays {
                for m in 0..num_slots {
                    mean[m] += inst[r * num_slots + m];
                }
            }
            let target = crate::util::argmax(&mean);
            let scale = 1.0 / (rays.len() as f64 * nm * nf);
            for &r in rays {
                let k = r * num_slots + target;
                let (l, g) = weighted_nll(inst[k], conf[r]);
                loss += l * scale;
                grad[k] += g * scale;
            }
        }
    }
    (loss, grad)
}
