//! Adam with per-group learning rates.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::util::{read_f64, read_f64s, read_u64, write_f64s};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam state for one parameter block. In sparse mode entries whose gradient
/// is exactly zero are left alone, moments included, which is what hash-grid
/// tables want: untouched slots should not drift.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub sparse: bool,
    pub frozen: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig, sparse: bool) -> Self {
        Adam {
            config,
            sparse,
            frozen: false,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        if self.frozen {
            return;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for i in 0..params.len() {
            let g = grads[i];
            if self.sparse && g == 0.0 {
                continue;
            }
            let m = beta1 * self.m[i] + (1.0 - beta1) * g;
            let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= step_size * m / (v.sqrt() / bc2_sqrt + eps);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        write_f64s(w, &[c.lr, c.beta1, c.beta2, c.eps])?;
        w.write_all(&[self.sparse as u8, self.frozen as u8])?;
        w.write_all(&self.step.to_le_bytes())?;
        write_f64s(w, &self.m)?;
        write_f64s(w, &self.v)
    }

    pub fn read_from<R: Read>(r: &mut R, len: usize) -> Result<Self> {
        let io = |e| Error::io("<optimizer state>", e);
        let n = read_u64(r).map_err(io)?;
        if n != 4 {
            return Err(Error::load("<optimizer state>", "bad optimizer header"));
        }
        let config = AdamConfig {
            lr: read_f64(r).map_err(io)?,
            beta1: read_f64(r).map_err(io)?,
            beta2: read_f64(r).map_err(io)?,
            eps: read_f64(r).map_err(io)?,
        };
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(io)?;
        let step = read_u64(r).map_err(io)?;
        let m = read_f64s(r, len).map_err(io)?;
        let v = read_f64s(r, len).map_err(io)?;
        Ok(Adam {
            config,
            sparse: flags[0] != 0,
            frozen: flags[1] != 0,
            m,
            v,
            step,
        })
    }
}
