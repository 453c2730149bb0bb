//! Discrete volume-rendering quadrature and its gradient.
//!
//! `α_j = 1 − exp(−σ_j δ_j)`, `T_j = Π_{i<j} (1 − α_i)`, `w_j = T_j α_j`.

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Composite {
    pub weights: Vec<f64>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
    pub opacity: f64,
}

impl Composite {
    /// Transmittance past the last sample.
    pub fn final_transmittance(&self) -> f64 {
        1.0 - self.opacity
    }
}

pub fn composite_weights(sigma: &[f64], deltas: &[f64]) -> Composite {
    debug_assert_eq!(sigma.len(), deltas.len());
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    // accumulate optical depth so T stays exact for long runs of empty samples
    let mut tau = 0.0f64;
    for (&s, &d) in sigma.iter().zip(deltas) {
        let t = (-tau).exp();
        let sd = s * d;
        let alpha = -(-sd).exp_m1();
        transmittance.push(t);
        weights.push(t * alpha);
        tau += sd;
    }
    let opacity = -(-tau).exp_m1();
    Composite {
        weights,
        transmittance,
        opacity,
    }
}

/// Composites `channels`-wide per-sample `values` (row-major `n × channels`)
/// over `background`; returns the rendered value and the quadrature terms.
pub fn composite(sigma: &[f64], values: &[f64], deltas: &[f64], channels: usize, background: &[f64]) -> (Vec<f64>, Composite) {
    let comp = composite_weights(sigma, deltas);
    let mut out = vec![0.0; channels];
    for (j, w) in comp.weights.iter().enumerate() {
        for c in 0..channels {
            out[c] += w * values[j * channels + c];
        }
    }
    let rest = comp.final_transmittance();
    for c in 0..channels {
        out[c] += rest * background.get(c).copied().unwrap_or(0.0);
    }
    (out, comp)
}

/// Gradients of `⟨d_out, composite(...)⟩` w.r.t. every `σ_j` and every value.
pub fn composite_backward(
    sigma: &[f64],
    values: &[f64],
    deltas: &[f64],
    channels: usize,
    background: &[f64],
    comp: &Composite,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = sigma.len();
    let mut d_values = vec![0.0; n * channels];
    for j in 0..n {
        for c in 0..channels {
            d_values[j * channels + c] = comp.weights[j] * d_out[c];
        }
    }
    // projected per-sample values and suffix sums Σ_{j>k} w_j ⟨v_j, d_out⟩
    let proj: Vec<f64> = (0..n)
        .map(|j| (0..channels).map(|c| values[j * channels + c] * d_out[c]).sum())
        .collect();
    let bg: f64 = (0..channels).map(|c| background.get(c).copied().unwrap_or(0.0) * d_out[c]).sum();
    let t_final = comp.final_transmittance();
    let mut d_sigma = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let t_next = comp.transmittance[k] * (-sigma[k] * deltas[k]).exp();
        d_sigma[k] = deltas[k] * (t_next * proj[k] - suffix - bg * t_final);
        suffix += comp.weights[k] * proj[k];
    }
    (d_sigma, d_values)
}
