//! Density, color, semantic, and instance decoder heads.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::types::Vec3;

pub const HIDDEN_WIDTH: usize = 64;
pub const DENSITY_FEATURES: usize = 16;

/// Parameter-free positional encoding of view directions:
/// `[d, sin(2^k π d), cos(2^k π d)]` for `k < num_frequencies`, each block
/// ordered x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionEncoding {
    pub num_frequencies: usize,
}

impl DirectionEncoding {
    pub fn new(num_frequencies: usize) -> Self {
        DirectionEncoding { num_frequencies }
    }

    pub fn output_dim(&self) -> usize {
        3 + 6 * self.num_frequencies
    }

    pub fn encode_into(&self, d: &Vec3, out: &mut [f64]) {
        out[..3].copy_from_slice(d.as_slice());
        for k in 0..self.num_frequencies {
            let f = (1u64 << k) as f64 * PI;
            let base = 3 + 6 * k;
            for i in 0..3 {
                let (s, c) = (f * d[i]).sin_cos();
                out[base + i] = s;
                out[base + 3 + i] = c;
            }
        }
    }

    pub fn encode(&self, d: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(d, &mut out);
        out
    }

    /// Chain rule from encoding gradient to direction gradient.
    pub fn backward(&self, d: &Vec3, upstream: &[f64]) -> Vec3 {
        let mut g = Vec3::new(upstream[0], upstream[1], upstream[2]);
        for k in 0..self.num_frequencies {
            let f = (1u64 << k) as f64 * PI;
            let base = 3 + 6 * k;
            for i in 0..3 {
                let (s, c) = (f * d[i]).sin_cos();
                g[i] += upstream[base + i] * f * c - upstream[base + 3 + i] * f * s;
            }
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub num_instance_slots: usize,
    pub dir_frequencies: usize,
    /// Scale applied to the initial weights of the semantic/instance logit layers.
    pub logit_init_scale: f64,
}

/// The four decoder heads plus the direction encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSet {
    pub density: Mlp,
    pub color: Mlp,
    pub semantic: Mlp,
    pub instance: Mlp,
    pub dir_encoding: DirectionEncoding,
}

impl DecoderSet {
    /// `color_in` and `panoptic_in` are the grid feature widths.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let h = HIDDEN_WIDTH;
        let pe = DirectionEncoding::new(cfg.dir_frequencies);
        use Activation::*;
        let density = Mlp::new(&[feature_dim, h, DENSITY_FEATURES], &[Relu, None], rng);
        let color = Mlp::new(&[DENSITY_FEATURES + pe.output_dim(), h, 3], &[Relu, Sigmoid], rng);
        let mut semantic = Mlp::new(&[feature_dim, h, h, cfg.num_classes], &[Relu, Relu, None], rng);
        let mut instance = Mlp::new(&[feature_dim, h, h, h, cfg.num_instance_slots], &[Relu, Relu, Relu, None], rng);
        for w in semantic.weight_mut(2) {
            *w *= cfg.logit_init_scale;
        }
        for w in instance.weight_mut(3) {
            *w *= cfg.logit_init_scale;
        }
        DecoderSet {
            density,
            color,
            semantic,
            instance,
            dir_encoding: pe,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.density.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.density.param_count() + self.color.param_count() + self.semantic.param_count() + self.instance.param_count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<decoder checkpoint>", e);
        w.write_all(b"PDEC").map_err(io)?;
        w.write_all(&(self.dir_encoding.num_frequencies as u64).to_le_bytes()).map_err(io)?;
        for m in [&self.density, &self.color, &self.semantic, &self.instance] {
            m.write_to(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e| Error::io("<decoder checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"PDEC" {
            return Err(Error::load("<decoder checkpoint>", "bad decoder magic"));
        }
        let nf = crate::util::read_u64(r).map_err(io)? as usize;
        Ok(DecoderSet {
            density: Mlp::read_from(r)?,
            color: Mlp::read_from(r)?,
            semantic: Mlp::read_from(r)?,
            instance: Mlp::read_from(r)?,
            dir_encoding: DirectionEncoding::new(nf),
        })
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} input")))
    }
}

/// Density features and `sigma = ReLU(features[15])`.
pub fn density_forward(set: &DecoderSet, g_c: &[f64]) -> Result<(Vec<f64>, f64)> {
    if g_c.len() != set.density.in_dim() {
        return Err(Error::Input(format!("density head expects {} features, got {}", set.density.in_dim(), g_c.len())));
    }
    check_finite(g_c, "density")?;
    let feats = set.density.forward_one(g_c);
    let sigma = feats[DENSITY_FEATURES - 1].max(0.0);
    Ok((feats, sigma))
}

pub fn color_forward(set: &DecoderSet, density_features: &[f64], dir_pe: &[f64]) -> Result<[f64; 3]> {
    let mut x = density_features.to_vec();
    x.extend_from_slice(dir_pe);
    if x.len() != set.color.in_dim() {
        return Err(Error::Input(format!("color head expects {} inputs, got {}", set.color.in_dim(), x.len())));
    }
    let y = set.color.forward_one(&x);
    Ok([y[0], y[1], y[2]])
}

pub fn semantic_forward(set: &DecoderSet, g_p: &[f64]) -> Vec<f64> {
    set.semantic.forward_one(g_p)
}

pub fn instance_forward(set: &DecoderSet, g_p: &[f64]) -> Vec<f64> {
    set.instance.forward_one(g_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            num_classes: 2,
            num_instance_slots: 5,
            dir_frequencies: 4,
            logit_init_scale: 1.0,
        }
    }

    fn zero_set() -> DecoderSet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = DecoderSet::new(8, &cfg(), &mut rng);
        for m in [&mut s.density, &mut s.color, &mut s.semantic, &mut s.instance] {
            m.params.fill(0.0);
        }
        s
    }

    #[test]
    fn pe_examples() {
        let e = DirectionEncoding::new(1).encode(&Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(&e[..3], &[0.0, 0.0, 1.0]);
        for (a, b) in e[3..6].iter().zip([0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in e[6..9].iter().zip([1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let d = Vec3::new(0.6, 0.0, 0.8);
        assert_eq!(DirectionEncoding::new(0).encode(&d), vec![0.6, 0.0, 0.8]);
        let pe = DirectionEncoding::new(4);
        assert_eq!(pe.encode(&d), pe.encode(&d));
        assert_eq!(pe.output_dim(), 27);
    }

    #[test]
    fn pe_backward_matches_differences() {
        let pe = DirectionEncoding::new(3);
        let d = Vec3::new(0.3, -0.5, 0.81);
        let up: Vec<f64> = (0..pe.output_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = pe.backward(&d, &up);
        let h = 1e-6;
        for i in 0..3 {
            let mut dp = d;
            dp[i] += h;
            let mut dm = d;
            dm[i] -= h;
            let f = |x: &Vec3| pe.encode(x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&dp) - f(&dm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn zero_network_outputs() {
        let s = zero_set();
        let (_, sigma) = density_forward(&s, &[0.3; 8]).unwrap();
        assert_eq!(sigma, 0.0);
        let rgb = color_forward(&s, &[0.0; 16], &s.dir_encoding.encode(&Vec3::z())).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
        let logits = semantic_forward(&s, &[0.1; 8]);
        assert!(logits.iter().all(|&l| l == 0.0));
        let mut p = vec![0.0; 2];
        softmax(&logits, &mut p);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_density_bias_clamps() {
        let mut s = zero_set();
        s.density.bias_mut(1)[DENSITY_FEATURES - 1] = -5.0;
        let (f, sigma) = density_forward(&s, &[1.0; 8]).unwrap();
        assert_eq!(f[DENSITY_FEATURES - 1], -5.0);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn saturated_color() {
        let mut s = zero_set();
        s.color.bias_mut(1).fill(20.0);
        let rgb = color_forward(&s, &[0.0; 16], &s.dir_encoding.encode(&Vec3::z())).unwrap();
        assert!(rgb.iter().all(|&c| (1.0 - c) < 1e-3));
    }

    #[test]
    fn density_matches_hand_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = DecoderSet::new(8, &cfg(), &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        // independent affine + ReLU chain
        let l0 = s.density.layer(0);
        let hidden: Vec<f64> = (0..64)
            .map(|o| (l0.bias[o] + (0..8).map(|i| l0.weight[o * 8 + i] * x[i]).sum::<f64>()).max(0.0))
            .collect();
        let l1 = s.density.layer(1);
        let last = l1.bias[15] + (0..64).map(|i| l1.weight[15 * 64 + i] * hidden[i]).sum::<f64>();
        let (_, sigma) = density_forward(&s, &x).unwrap();
        assert!((sigma - last.max(0.0)).abs() < 1e-12);
        assert!(density_forward(&s, &[f64::NAN; 8]).is_err());
    }

    #[test]
    fn two_class_hand_computation() {
        let mut s = zero_set();
        // identity-ish first layers, last layer picks features
        let sem = &mut s.semantic;
        sem.weight_mut(0)[0] = 1.0; // h0 = relu(x0)
        sem.weight_mut(1)[0] = 2.0; // h'0 = relu(2 h0)
        sem.weight_mut(2)[0] = 1.5; // logit0 = 1.5 h'0
        sem.weight_mut(2)[64] = -1.0; // logit1 = -h'0
        sem.bias_mut(2)[1] = 0.25;
        let logits = semantic_forward(&s, &[0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((logits[0] - 1.2).abs() < 1e-12);
        assert!((logits[1] - (-0.8 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn instance_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = DecoderSet::new(8, &cfg(), &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let base = instance_forward(&s, &x);
        let mut p = s.clone();
        let perm = [2usize, 0, 4, 1, 3];
        let l = 3;
        let w = s.instance.layer(l).weight.to_vec();
        let b = s.instance.layer(l).bias.to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            p.instance.weight_mut(l)[dst * 64..(dst + 1) * 64].copy_from_slice(&w[src * 64..(src + 1) * 64]);
            p.instance.bias_mut(l)[dst] = b[src];
        }
        let permuted = instance_forward(&p, &x);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(permuted[dst], base[src]);
        }
    }

    #[test]
    fn architecture_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = DecoderSet::new(24, &cfg(), &mut rng);
        assert_eq!(s.density.dims(), &[24, 64, 16]);
        assert_eq!(s.color.dims(), &[16 + 27, 64, 3]);
        assert_eq!(s.semantic.dims(), &[24, 64, 64, 2]);
        assert_eq!(s.instance.dims(), &[24, 64, 64, 64, 5]);
    }
}
